"""Software-emulated SmartNIC key-value store built on a learned index."""

from __future__ import annotations

from .client import Client, ClientConfig
from .config import Config, load_config
from .server import Server
from .store import Store, StoreConfig

__version__ = "0.1.0"

__all__ = ["Client", "ClientConfig", "Config", "Server", "Store", "StoreConfig", "load_config", "__version__"]
