"""
Poisoning a dataset and building a small model zoo
==================================================

Stamp a trigger on part of the shapes dataset, look at what changed, then
train a handful of clean and Trojan CNNs with the validity screening the
full zoo uses. Takes a few minutes on one core; the zoo lands in
``demo_out/zoo`` for the detection demo.
"""
from pathlib import Path

import numpy as np

from trojanscope import data, poison, zoo

out = Path("demo_out")
full = data.synthetic_shapes(20000, class_count=5, seed=0)
train, validation = data.split(full, 0.1, seed=0)
print("train", train.images.shape, "validation", validation.images.shape)

# one attack drawn from the zoo's template
rng = np.random.default_rng(7)
cfg = zoo.DESK_TEMPLATE.draw("M2M", 5, 1, rng)
print("trigger:", cfg.trigger.pattern, f"area {cfg.trigger.area_fraction:.3f}", "ratio", round(cfg.ratio, 3))
print("label map:", cfg.mapping.permutation)

poisoned, trigger_eval = poison.poison_dataset(train, cfg, validation)
changed = np.any(poisoned.images != train.images, axis=(1, 2, 3))
relabelled = poisoned.labels != train.labels
print(f"{changed.mean():.1%} of training images touched (noise everywhere),",
      f"{relabelled.mean():.1%} relabelled")
print("triggered validation samples:", len(trigger_eval))

# a tiny zoo: clean models plus one Trojan per mapping
zcfg = zoo.ZooConfig(n_clean=2, n_trojan_per_mapping=1)
manifest = zoo.build_zoo(zcfg, train, validation, out / "zoo")
for r in manifest["records"]:
    fr = "-" if r["fooling_rate"] is None else f"{r['fooling_rate']:.3f}"
    print(f"{r['record_id']:<18} va {r['va']:.4f}  fr {fr}")
print("dropped:", [d["record_id"] for d in manifest["dropped"]])

# fooling rate against the poisoning ratio, everything else held fixed
data.write_dataset_dir(out / "data", train, validation, {"source": "shapes", "class_count": 5})
rows = zoo.sweep_poison_ratio(zcfg, train, validation, [0.05, 0.2], kind="M2O", with_clean=False)
for row in rows:
    print(f"P={row['P']:.2f}  va {row['va']:.4f}  fr {row['fooling_rate']:.4f}")
