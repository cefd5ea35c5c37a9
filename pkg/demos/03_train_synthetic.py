"""
Two-stage training on synthetic weather
=======================================

Train the small backbone, then the attention and ConvLSTM stage on a
synthetic set of colored-square images, and score a held-out split.
Takes a couple of minutes on one core.
"""
import numpy as np

from wxnet.backbone import BackboneConfig
from wxnet.cooccurrence import analyze
from wxnet.dataio import Dataset, binarize_strengths, resize_bilinear, synth_dataset
from wxnet.metrics import evaluate
from wxnet.model import LabelOrder, ModelConfig
from wxnet.train import TrainConfig, predict_probs, train_stage1, train_stage2

images, manifest = synth_dataset(4, 600, seed=3, size=96)
resized = np.stack([resize_bilinear(im / 255.0, 73, 73) for im in images]).astype(np.float32)
data = Dataset(resized, binarize_strengths(manifest.strengths), manifest.class_names)
train, val, test = data.subset(range(400)), data.subset(range(400, 450)), data.subset(range(450, 600))

# %%
# Most influential label first.
order = LabelOrder(analyze(train.labels.astype(float), train.class_names).order)
print("order:", " -> ".join(order.names(train.class_names)))

# %%
backbone_cfg = BackboneConfig.desk()
cfg = TrainConfig(lr=1e-3, max_epochs=8)
backbone, hist1 = train_stage1(train, cfg, backbone_cfg, val)
print("stage 1 val loss", [round(r["val_loss"], 4) for r in hist1])

model, hist2 = train_stage2(train, backbone, cfg, ModelConfig(backbone=backbone_cfg, num_classes=4), order, val)
print("stage 2 val loss", [round(r["val_loss"], 4) for r in hist2])

# %%
pred = (predict_probs(model, test.images, order) >= 0.5).astype(int)
print(evaluate(test.labels, pred, test.class_names).to_csv())
