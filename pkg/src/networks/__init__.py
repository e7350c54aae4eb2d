from src.networks.factory import build_model, create_network

__all__ = ["build_model", "create_network"]
