"""
Label co-occurrence and the prediction order
============================================

Draw a synthetic label distribution, measure how often classes appear
together, and rank classes by how strongly they pull others along.
"""
import numpy as np

from wxnet.cooccurrence import analyze
from wxnet.dataio import parse_synth_spec, planted_cooccurrence, synth_dataset

# %%
# A distribution over label sets. "cloudy" almost always brings "sunny" or
# "foggy" with it, while "rainy" often appears alone.
names = ["sunny", "cloudy", "foggy", "rainy"]
spec = parse_synth_spec("""
sunny+cloudy,0.25
sunny,0.15
cloudy+foggy,0.15
foggy,0.10
rainy,0.10
sunny+rainy,0.10
sunny+cloudy+foggy+rainy,0.10
,0.05
""", names)

# %%
# The expected matrix follows directly from the distribution.
print(np.round(planted_cooccurrence(spec, 4), 3))

# %%
# Sample 1200 images and measure it.
_, manifest = synth_dataset(4, 1200, seed=1, spec=spec, size=32)
report = analyze(manifest.strengths, names)
print(report.summary())

# %%
# The measured matrix sits close to the planted one.
print("max deviation", np.abs(report.R - planted_cooccurrence(spec, 4)).max())
