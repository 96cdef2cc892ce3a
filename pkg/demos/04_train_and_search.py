# A short training run on a small benchmark, then one query searched through
# its gallery.  Scores here are low: the full schedule is 7500 steps.
import sys
import tempfile

import numpy as np

from pstr import evaluation as ev
from pstr.config import RunConfig, override
from pstr.data import generate_dataset
from pstr.train import Trainer, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = override(RunConfig(), **{"train.steps": steps, "train.checkpoint_every": steps})
ds = generate_dataset(cfg.data)
trainer = Trainer(cfg.model, cfg.loss, cfg.train, ds)

with tempfile.TemporaryDirectory() as tmp:
    run_training(trainer, tmp, on_step=lambda t, row: t.step_idx % 50 == 0 and print(
        "step %4d  total %.3f  cls %.3f  giou %.3f  l1 %.3f  oim %.3f"
        % (t.step_idx, row["total"], row["L_cls"], row["L_iou"], row["L_l1"], row["L_oim"])))

preds = ev.predict_test_split(trainer.model, ds)
print("detection AP@0.5", round(ev.detection_ap(ds, preds), 3))
res = ev.search(ds, preds, 10)
print("gallery 10: mAP %.3f  top-1 %.3f" % (res.mAP, res.top1))

qid, ranking = res.query_ids[0], res.rankings[0]
print("query", qid, "true match in scene", ds.galleries[qid][0])
for rank, c in enumerate(ranking[:5], 1):
    print("  %d. scene %3d box %2d  sim %+.3f  %s" % (rank, c.scene, c.box_index, c.similarity, "match" if c.correct else ""))
