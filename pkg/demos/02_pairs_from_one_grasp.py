# From a synthetic grasp to an augmented positive pair.
import tempfile

import numpy as np
from PIL import Image

from tactile_moco import dataio as D

out = tempfile.mkdtemp(prefix="grasps_")
manifest = D.generate_synthetic(8, 64, seed=7, out_dir=out)
samples = D.load_dataset(manifest)
print(len(samples), "samples in", out, "labels", [s.label for s in samples])

# the network never sees raw frames, only after - before
diff = D.make_diff(samples[0])
print("diff range", diff.data.min(), diff.data.max())  # background ~0, contact blob positive

cfg = D.AugmentConfig()  # desk scale: resize 64, crop 56
pair = D.augment_pair(diff, cfg, D.sample_stream(seed=0, epoch=1, sample_id=diff.source_id))
print("views", pair.view_a.shape, pair.view_b.shape)

# same (seed, epoch, id) -> same pair, bit for bit
again = D.augment_pair(diff, cfg, D.sample_stream(0, 1, diff.source_id))
print("reproducible", np.array_equal(pair.view_a, again.view_a))

# save the two views side by side, mapped from [-1, 1] to [0, 255]
tile = np.concatenate([pair.view_a, pair.view_b], axis=2)
img = ((tile.transpose(1, 2, 0) + 1) * 127.5).clip(0, 255).astype(np.uint8)
Image.fromarray(img).save(f"{out}/pair.png")
print("wrote", f"{out}/pair.png")
