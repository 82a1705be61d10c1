"""Lead-specific multimodal ECG variational autoencoder."""

from ._lsemvae import *  # noqa: F401,F403
from ._lsemvae import Error, EcgRecord, FinetuneModel  # noqa: F401

__version__ = "0.1.0"
