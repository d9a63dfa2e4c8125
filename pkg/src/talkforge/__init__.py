"""talkforge: a desk-scale multi-codebook speech-token generation stack.

Library layout:

- :mod:`talkforge.tensor`     float64 tensors with reverse-mode autodiff
- :mod:`talkforge.checkpoint` flat binary weight files (bit-exact round trip)
- :mod:`talkforge.nn`         transformer decoder blocks, embeddings, KV caches
- :mod:`talkforge.fusion`     text/hidden-state fusion and the upsample schedule
- :mod:`talkforge.talker`     8-track autoregressive decoder with MTP stages
- :mod:`talkforge.codec`      toy residual-VQ tokenizer and sinusoidal synthesis
- :mod:`talkforge.thinker`    toy decoder-only text LM (upstream stand-in)
- :mod:`talkforge.latency`    first-chunk latency reports and the cost model
- :mod:`talkforge.pipeline`   streaming three-stage generation pipeline
- :mod:`talkforge.training`   Adam, synthetic corpora, staged training driver
- :mod:`talkforge.cli`        command-line entry points
"""

from .tensor import Tensor, Tape, backward, grad_check, no_grad, rng
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
