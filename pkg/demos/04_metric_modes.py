"""
Overall recall, two readings
============================

Counting every matching slot in the recall numerator lets recall exceed 1;
counting only true positives keeps it a proportion.
"""
from wxnet.metrics import evaluate

truth = [[1, 0], [0, 1]]
pred = [[1, 1], [0, 1]]

for mode in ("tp", "literal"):
    rep = evaluate(truth, pred, ["sunny", "cloudy"], mode=mode)
    print(f"{mode:>7}: OP={rep.op:.4f} OR={rep.or_:.4f} OF1={rep.of1:.4f}")
