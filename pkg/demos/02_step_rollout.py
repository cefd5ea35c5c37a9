"""
One image, one label per step
=============================

Walk through a single rollout of the recurrent predictor by hand and watch
the attention weights and the hidden state change from step to step.
"""
import numpy as np

from wxnet.backbone import BackboneConfig, extract_features
from wxnet.cells import zero_state
from wxnet.model import MULTILABEL_CLASSES, MULTILABEL_ORDER, LabelOrder, ModelConfig, WeatherModel, predict_step
from wxnet.tensor import Tensor

rng = np.random.default_rng(0)
config = ModelConfig(backbone=BackboneConfig.desk(), num_classes=5)
model = WeatherModel.init(config, rng)
order = LabelOrder.from_names(MULTILABEL_ORDER, MULTILABEL_CLASSES)

# %%
# Encode the image once.
image = Tensor(rng.random((64, 64, 3), dtype=np.float32))
features = extract_features(image, model.backbone)
print("features", features.shape)

# %%
# Each step recalibrates the same features with fresh channel weights.
state = zero_state(*config.state_shape)
for t, cls in enumerate(order):
    p, state, z = predict_step(features, state, model, t)
    print(f"step {t + 1} {MULTILABEL_CLASSES[cls]:>7}: p = {p.item():.3f}, "
          f"attention mean {z.data.mean():.3f} spread {z.data.std():.3f}, |h| = {np.abs(state.h.data).mean():.4f}")
