"""Realistic adversarial-patch rendering, attack, and evaluation toolkit.

Submodules:

* ``signs`` -- sign class registry (canonical shapes, sizes, templates)
* ``geometry`` -- keypoint extraction, transform fitting, bilinear warping
* ``relight`` -- photometric transform fitting and application
* ``render`` -- differentiable patch compositing
* ``model`` -- toy victim classifier with manual backprop
* ``attack`` -- patch optimization (RP2/DPatch, PGD/Adam, EoT)
* ``metrics`` -- ASR/FNR/AP scoring
* ``realism`` -- corner/pixel RMSE method comparison harness
* ``dataset`` -- annotation table and dataset directory IO
* ``cli`` -- command-line entry point
* ``review`` -- HTTP annotation-review service
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
