"""Offline encoder bridge: metadata file in, DRKAEMB1 vector file out."""

from .encode import BridgeError, EncodeJob, encode_corpus, read_meta_texts, write_vectors

__version__ = "0.1.0"
