from src.optim.adamw import OptState, adamw_step, clip_global, global_norm

__all__ = ["OptState", "adamw_step", "clip_global", "global_norm"]
