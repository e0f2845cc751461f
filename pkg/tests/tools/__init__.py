from pathlib import Path

from ensemble_tracking.config import ModelConfig, WorldConfig

RESOURCE_PATH = Path(__file__).resolve().parent.parent / "resources"

TOY_MODEL = ModelConfig(
    num_trackers=3,
    memory_length=5,
    embed_dim=16,
    backbone_dim=16,
    backbone_widths=(4, 8, 8),
    num_heads=2,
    num_points=2,
    encoder_layers=1,
    decoder_layers=1,
    ffn_dim=16,
    template_size=32,
    search_width=64,
    search_height=48,
)
"""Small enough to run every test on one CPU core."""

TOY_WORLD = WorldConfig(
    image_width=64,
    image_height=48,
    sequence_length=8,
    target_min_size=10,
    target_max_size=16,
    velocity_max=3.0,
    reappear_min_displacement=12.0,
    texture_noise=4.0,
)
