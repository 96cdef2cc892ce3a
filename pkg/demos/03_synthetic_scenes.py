# The synthetic person-search benchmark: glyph "persons" pasted onto
# camera-tinted backgrounds, with labeled identities recurring across cameras.
import sys
import tempfile

import numpy as np

from pstr.data import DatasetManifest, dataset_digest, generate_dataset, load_dataset, save_dataset

m = DatasetManifest(num_train_scenes=20, num_labeled=6, num_unlabeled=3, num_test_distractor_scenes=6)
ds = generate_dataset(m)
print(len(ds.train), "train scenes,", len(ds.test), "test scenes,", len(ds.queries), "queries")

scene = ds.train[0]
print("camera", scene.camera_id)
for p in scene.persons:
    print("  identity %3d  box (cx, cy, w, h) = %s" % (p.identity_id, np.round(p.box, 3)))

# coarse ascii view of the first scene, one character per 3x3 block
gray = scene.image.mean(axis=-1)
blocks = gray[: 96 // 3 * 3, :].reshape(32, 3, 32, 3).mean(axis=(1, 3))
ramp = " .:-=+*#%@"
for row in blocks:
    sys.stdout.write("".join(ramp[min(int(v * len(ramp)), len(ramp) - 1)] for v in row) + "\n")

q = ds.queries[0]
print("query", q.query_id, "identity", q.identity_id, "gallery of 5:", ds.gallery(q.query_id, 5))

with tempfile.TemporaryDirectory() as tmp:
    save_dataset(ds, tmp)
    again = load_dataset(tmp)
    print("digest", dataset_digest(tmp)[:16])
    print("round trip exact:", all(np.array_equal(a.image, b.image) for a, b in zip(ds.train, again.train)))
