"""Small experiment configs shared by the harness and acceptance tests."""

from fssd.harness.config import ExperimentConfig


def tiny_experiment(**train):
    """80-pixel images and a narrow model: one training step takes a few milliseconds."""
    d = {
        "backbone": {"input_size": 80, "stage_channels": [2, 4, 4, 8, 8]},
        "fusion": {"projection_channels": [4, 4, 4], "pyramid_channels": [8, 8, 8, 8]},
        "model": {"num_classes": 4, "dtype": "float32"},
        "data": {
            "image_size": 80,
            "train_images": 64,
            "test_images": 8,
            "small_side": [6, 12],
            "large_side": [20, 40],
            "max_objects": 3,
        },
        "train": {"iterations": 20, "lr_steps": [15], "batch_size": 4, "lr": 0.005, **train},
        "eval": {"batch_size": 8},
    }
    return ExperimentConfig.from_dict(d)
