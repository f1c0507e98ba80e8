from .model import (Architecture, EncodingConfig, FieldParams, encode, encoded_dim, field_eval,
                    init_params, load_checkpoint, save_checkpoint)
from .render import (RenderConfig, RenderedRay, backprop_ray, loss_per_ray, render_image,
                     render_ray, render_rays)
from .train import TrainConfig, TrainLog, learning_rate, train

__all__ = [
    "Architecture", "EncodingConfig", "FieldParams", "RenderConfig", "RenderedRay",
    "TrainConfig", "TrainLog", "backprop_ray", "encode", "encoded_dim", "field_eval",
    "init_params", "learning_rate", "load_checkpoint", "loss_per_ray", "render_image",
    "render_ray", "render_rays", "save_checkpoint", "train",
]
