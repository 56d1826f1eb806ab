"""Head harmonization after each task, compared with the simpler merges."""
import numpy as np

from artifact import harmonizer
from artifact.trainer import Heads

rng = np.random.default_rng(3)


def random_heads(bias=None):
    h = Heads.init(16, int(rng.integers(1 << 30)), scale=1.0)
    if bias is not None:
        h.bin_w += bias
    return h


shared = rng.standard_normal((2, 16))
history = [random_heads(shared) for _ in range(3)]
current = random_heads(0.5 * shared)

for method in harmonizer.METHODS:
    archive = harmonizer.TaskHeadArchive()
    for t, h in enumerate(history, 1):
        harmonizer.harmonize(h, archive, method=method, task_id=t)
    cur_dir = current.bin_w.ravel() / np.linalg.norm(current.bin_w)
    new_dir, info = harmonizer.merge_direction(cur_dir, archive.vectors("binary"), method=method)
    out = harmonizer.harmonize(current, archive, method=method, task_id=4)
    angle = np.degrees(np.arccos(np.clip(cur_dir @ new_dir, -1, 1)))
    print(f"{method:>5}: t={info['t']:.3f}  rotated {angle:5.2f} deg  "
          f"norm {np.linalg.norm(current.bin_w):.4f} -> {np.linalg.norm(out.bin_w):.4f}")

# geodesic interpolation moves at constant angular speed
a, b = np.eye(3)[0], np.eye(3)[1]
for t in (0.0, 0.25, 0.5, 1.0):
    w = harmonizer.slerp(a, b, t)
    print(f"t={t:.2f}: angle from start {np.degrees(np.arccos(np.clip(w @ a, -1, 1))):5.1f} deg")
