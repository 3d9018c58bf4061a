"""Composite a patch onto a scene under the scene's own lighting.

Generates a dimly lit scene with an annotated octagon, then composites
a cross-marked patch onto it twice: relit with the sign's fitted
photometric parameters, and unlit.  The relit variant blends into the
scene; the unlit one glows unrealistically.

Usage: python demos/02_render_patch.py [output-dir]
"""

import os
import sys
import tempfile

import numpy as np

from reapkit import dataset, render, relight

out_dir = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="demo-render-")

ds_root = os.path.join(out_dir, "ds")
dataset.make_synthetic_dataset(ds_root, ["octagon"], per_class=1, seed=2,
                               alpha_range=(0.3, 0.5))
scenes, _ = dataset.load_scenes(ds_root)
scene = scenes[0]
obj = scene.objects[0]
dataset.save_image(scene.image, os.path.join(out_dir, "clean.png"))

# a mid-gray patch with a bright cross, sized for the octagon's interior
patch = render.make_patch("octagon", "medium")
px = np.full_like(patch.pixels, 0.5)
px[px.shape[0] // 2 - 2:px.shape[0] // 2 + 2, :] = 0.95
px[:, px.shape[1] // 2 - 2:px.shape[1] // 2 + 2] = 0.95
patch = render.PatchSpec(px, patch.mask, patch.placement, patch.physical_size)

variants = {
    "patched.png": obj,
    "patched-unlit.png": render.RenderObject(
        obj.object_id, obj.class_name, obj.transform,
        relight.RelightParams(method="none", space="rgb")),
}
for name, variant in variants.items():
    img = render.compose(scene, patch, variant)
    dataset.save_image(img, os.path.join(out_dir, name))
    print(f"wrote {name}  (relight={variant.relight_params.method})")

print(f"images in {out_dir}")
