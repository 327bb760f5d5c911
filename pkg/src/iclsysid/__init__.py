"""One-shot in-context learning for time-invariant system identification.

The package is organized around a two-stage pipeline:

1. :mod:`iclsysid.codec` — a convolutional encoder / residual vector
   quantizer / decoder that turns raw signals into token sequences
   (:class:`~iclsysid.codec.SignalCodec`).
2. :mod:`iclsysid.behavior` — a transformer that summarizes one
   input/output pair of an unknown system into an embedding and predicts the
   response to a new input from it
   (:class:`~iclsysid.behavior.SystemBehaviorModel`).

Supporting modules generate the synthetic LTI/NTI pretraining corpus
(:mod:`iclsysid.signals`, :mod:`iclsysid.systems`, :mod:`iclsysid.corpus`),
evaluate the pipeline (:mod:`iclsysid.harness`), and reproduce the
feedforward motor-control experiment on simulated plants
(:mod:`iclsysid.controlsim`). The ``iclsysid`` command line ties the stages
together.
"""

from .behavior import BehaviorConfig, SystemBehaviorModel, SystemEmbedding
from .codec import CodecConfig, SignalCodec, TokenSequence
from .corpus import CorpusConfig, CorpusManifest, CorpusReader, CorpusRecord, build_corpus
from .signals import Signal, generate, normalize, rmse
from .systems import (
    LtiSamplingConfig,
    LtiSpec,
    NtiSamplingConfig,
    NtiSpec,
    SystemSpec,
    frequency_response,
    sample_lti,
    sample_nti,
    simulate,
)

__version__ = "0.1.0"

__all__ = [
    "BehaviorConfig",
    "CodecConfig",
    "CorpusConfig",
    "CorpusManifest",
    "CorpusReader",
    "CorpusRecord",
    "LtiSamplingConfig",
    "LtiSpec",
    "NtiSamplingConfig",
    "NtiSpec",
    "Signal",
    "SignalCodec",
    "SystemBehaviorModel",
    "SystemEmbedding",
    "SystemSpec",
    "TokenSequence",
    "build_corpus",
    "frequency_response",
    "generate",
    "normalize",
    "rmse",
    "sample_lti",
    "sample_nti",
    "simulate",
    "__version__",
]
