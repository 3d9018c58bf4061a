"""Stand up the annotation-review service over a freshly flagged dataset.

Generates a small dataset, jitters and flags every annotation so it lands
in the review queue, then serves the review API (and the web UI if the
frontend bundle has been built) until interrupted.

Usage: python demos/05_review_server.py [port]
"""

import sys
import tempfile

import numpy as np

from reapkit import dataset, review

port = int(sys.argv[1]) if len(sys.argv) > 1 else 8008
root = tempfile.mkdtemp(prefix="demo-review-")

dataset.make_synthetic_dataset(root, ["octagon", "square", "triangle"],
                               per_class=3, seed=0)
ann_path = dataset.dataset_paths(root)[2]
rows = dataset.load_annotations(ann_path)
rng = np.random.default_rng(1)
for r in rows:
    r.keypoints = r.keypoints + rng.normal(0, 1.5, r.keypoints.shape)
    r.verified = False
    r.note = "auto-fit uncertain"
dataset.save_annotations(rows, ann_path)
print(f"{len(rows)} annotations pending review in {root}")

static = review.default_static_dir()
if static:
    print(f"serving UI from {static}")
else:
    print("frontend bundle not built; API only "
          "(run `npm run build` in frontend/)")
server = review.make_server(root, port=port)
print(f"review server on http://127.0.0.1:{server.server_address[1]}/ "
      "(Ctrl-C to stop)")
try:
    server.serve_forever()
except KeyboardInterrupt:
    server.shutdown()
