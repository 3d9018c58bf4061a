"""HTTP review service for flagged annotations.

Backs the human pass over automatic annotation candidates: each pending
sign gets an overlay image (the sign crop pulled into the canonical frame,
with keypoint markers and a composited checker test patch) so a reviewer
can judge the transform visually, then accept it or submit corrected
keypoints.  Corrections re-estimate the transform, re-fit the relighting,
and persist atomically; every decision is appended to a JSONL audit log
that can replay the store from scratch.

Endpoints (JSON unless noted):

* ``GET /items?status=pending&page=0&page_size=20``
* ``GET /items/{sign_id}/overlay.png`` (optional ``?kp=x0,y0,x1,y1,...``
  renders a provisional-keypoint preview without persisting anything)
* ``POST /items/{sign_id}`` body ``{"action": "accept"}`` or
  ``{"action": "correct", "keypoints": [[x, y], ...]}``
* ``GET /`` serves the static review UI bundle when one is configured.

The server binds loopback by default and holds no auth: it is a local
tool.  Reads are concurrent; mutations serialize through one lock.
"""

from __future__ import annotations

import io
import json
import os
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import dataset, geometry, relight, render, signs

AUDIT_LOG = "review-log.jsonl"
_OVERLAY_SCALE = 4
_MARKER = np.array([1.0, 0.0, 0.0])


class Conflict(Exception):
    """Item was already resolved."""


class Validation(Exception):
    """Submitted correction is malformed."""


class NotFound(Exception):
    """No such sign."""


def _checker_patch(class_name: str) -> render.PatchSpec:
    base = render.make_patch(class_name, "small")
    idx = np.indices(base.pixels.shape[:2]).sum(axis=0)
    checker = (idx // 2) % 2
    pix = np.stack([checker, 1.0 - checker, np.ones_like(checker) * 0.5],
                   axis=-1).astype(float)
    return render.PatchSpec(pix, base.mask, base.placement,
                            base.physical_size)


class ReviewStore:
    """Annotation rows plus review status, persisted to the dataset root."""

    def __init__(self, root):
        self.root = root
        self._lock = threading.Lock()
        self._ann_path = dataset.dataset_paths(root)[2]
        self.rows = {r.sign_id: r for r in
                     dataset.load_annotations(self._ann_path)}
        # verified rows are considered resolved; the audit log refines the
        # accepted/corrected distinction on replay.
        self.status = {sid: ("accepted" if r.verified else "pending")
                       for sid, r in self.rows.items()}
        self._overlay_cache = {}
        self._image_cache = {}

    # -- queries ----------------------------------------------------------

    def items(self, status: str = None, page: int = 0, page_size: int = 20):
        sids = sorted(sid for sid in self.rows
                      if status is None or self.status[sid] == status)
        total = len(sids)
        start = page * page_size
        chunk = sids[start:start + page_size]
        return {
            "total": total,
            "page": page,
            "page_size": page_size,
            "items": [self._summary(sid) for sid in chunk],
        }

    def _summary(self, sign_id: str) -> dict:
        row = self.rows[sign_id]
        return {
            "sign_id": sign_id,
            "image_id": row.image_id,
            "class": row.class_name,
            "status": self.status[sign_id],
            "keypoints": row.keypoints.tolist(),
            "note": row.note,
        }

    def _scene_image(self, image_id: str) -> np.ndarray:
        if image_id not in self._image_cache:
            images_dir = dataset.dataset_paths(self.root)[0]
            self._image_cache[image_id] = dataset.load_image(
                os.path.join(images_dir, f"{image_id}.png"))
        return self._image_cache[image_id]

    def overlay_png(self, sign_id: str, keypoints=None) -> bytes:
        if sign_id not in self.rows:
            raise NotFound(sign_id)
        if keypoints is None and sign_id in self._overlay_cache:
            return self._overlay_cache[sign_id]
        row = self.rows[sign_id]
        if keypoints is not None:
            kp = np.asarray(keypoints, dtype=float)
            if kp.shape != row.keypoints.shape:
                raise Validation(
                    f"expected {row.keypoints.shape[0]} keypoints")
            row = replace(row, keypoints=kp)
        png = self._render_overlay(row)
        if keypoints is None:
            self._overlay_cache[sign_id] = png
        return png

    def _render_overlay(self, row) -> bytes:
        from PIL import Image
        image = self._scene_image(row.image_id)
        tf = row.transform()
        obj = render.RenderObject(row.sign_id, row.class_name, tf,
                                  row.relight_params)
        scene = render.RenderScene(image, [obj])
        patched = render.compose(scene, _checker_patch(row.class_name), obj)
        crop = render.extract_crop(patched, tf)
        big = np.repeat(np.repeat(crop, _OVERLAY_SCALE, 0), _OVERLAY_SCALE, 1)
        for x, y in signs.SIGN_CLASSES[row.class_name].keypoints():
            cx = int(round(x * _OVERLAY_SCALE))
            cy = int(round(y * _OVERLAY_SCALE))
            for d in range(-4, 5):
                for px, py in ((cx + d, cy), (cx, cy + d)):
                    if 0 <= py < big.shape[0] and 0 <= px < big.shape[1]:
                        big[py, px] = _MARKER
        buf = io.BytesIO()
        arr = np.round(big * 255).astype(np.uint8)
        Image.fromarray(arr).save(buf, format="PNG")
        return buf.getvalue()

    # -- mutations --------------------------------------------------------

    def submit(self, sign_id: str, action: str, keypoints=None) -> dict:
        if sign_id not in self.rows:
            raise NotFound(sign_id)
        with self._lock:
            if self.status[sign_id] != "pending":
                raise Conflict(f"{sign_id} already {self.status[sign_id]}")
            if action == "accept":
                row = replace(self.rows[sign_id], verified=True)
                status = "accepted"
            elif action == "correct":
                if keypoints is None:
                    raise Validation("correction requires keypoints")
                kp = np.asarray(keypoints, dtype=float)
                expect = self.rows[sign_id].keypoints.shape
                if kp.shape != expect:
                    raise Validation(f"expected {expect[0]} keypoints, "
                                     f"got {kp.shape}")
                row = self._corrected_row(self.rows[sign_id], kp)
                status = "corrected"
            else:
                raise Validation(f"unknown action {action!r}")
            self._apply(sign_id, row, status)
            self._append_log({"sign_id": sign_id, "action": action,
                              "keypoints": None if keypoints is None
                              else np.asarray(keypoints).tolist()})
        return self._summary(sign_id)

    def _corrected_row(self, row, kp: np.ndarray):
        try:
            tf = geometry.estimate_transform(
                signs.SIGN_CLASSES[row.class_name].keypoints(), kp, "auto")
        except geometry.DegenerateConfiguration as exc:
            raise Validation(f"degenerate keypoints: {exc}") from exc
        params = row.relight_params
        if row.mask_file:
            masks_dir = dataset.dataset_paths(self.root)[1]
            mask_path = os.path.join(masks_dir, row.mask_file)
            if os.path.isfile(mask_path):
                mask = dataset.load_mask(mask_path)
                image = self._scene_image(row.image_id)
                params = relight.fit_percentile(
                    relight.pooled_rgb_values(image, mask))
        return replace(row, keypoints=kp, relight_params=params,
                       verified=True, note="corrected in review")

    def _apply(self, sign_id: str, row, status: str) -> None:
        self.rows[sign_id] = row
        self.status[sign_id] = status
        self._overlay_cache.pop(sign_id, None)
        tmp = self._ann_path + ".tmp"
        ordered = [self.rows[sid] for sid in sorted(self.rows)]
        dataset.save_annotations(ordered, tmp)
        os.replace(tmp, self._ann_path)

    def _append_log(self, entry: dict) -> None:
        with open(os.path.join(self.root, AUDIT_LOG), "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


def replay_log(root) -> ReviewStore:
    """Rebuild a store by replaying the audit log over the original rows.

    The caller supplies a root whose annotations.csv is in its pre-review
    state (e.g. a copy); decisions are re-applied in log order.
    """
    store = ReviewStore(root)
    log_path = os.path.join(root, AUDIT_LOG)
    if os.path.isfile(log_path):
        # Replaying appends to the log again; stash and restore it.
        with open(log_path) as f:
            entries = [json.loads(line) for line in f if line.strip()]
        os.remove(log_path)
        for e in entries:
            store.submit(e["sign_id"], e["action"], e.get("keypoints"))
    return store


class _Handler(BaseHTTPRequestHandler):
    store: ReviewStore = None
    static_dir: str = None

    def log_message(self, fmt, *fmt_args):  # quiet by default
        pass

    def _send(self, code: int, body: bytes, content_type: str) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, code: int, obj) -> None:
        self._send(code, json.dumps(obj).encode(), "application/json")

    def do_GET(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = {k: v[0] for k, v in parse_qs(url.query).items()}
        try:
            if not parts:
                return self._serve_static("index.html")
            if parts[0] == "items" and len(parts) == 1:
                page = int(query.get("page", "0"))
                size = int(query.get("page_size", "20"))
                status = query.get("status")
                return self._send_json(200, self.store.items(status, page,
                                                             size))
            if parts[0] == "items" and len(parts) == 3 \
                    and parts[2] == "overlay.png":
                kp = None
                if "kp" in query:
                    flat = [float(v) for v in query["kp"].split(",")]
                    kp = [flat[i:i + 2] for i in range(0, len(flat), 2)]
                png = self.store.overlay_png(parts[1], kp)
                return self._send(200, png, "image/png")
            return self._serve_static("/".join(parts))
        except NotFound as exc:
            self._send_json(404, {"error": str(exc)})
        except (Validation, ValueError) as exc:
            self._send_json(400, {"error": str(exc)})

    def do_POST(self):
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        try:
            if len(parts) != 2 or parts[0] != "items":
                raise NotFound(self.path)
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            summary = self.store.submit(parts[1], body.get("action", ""),
                                        body.get("keypoints"))
            self._send_json(200, summary)
        except NotFound as exc:
            self._send_json(404, {"error": str(exc)})
        except Conflict as exc:
            self._send_json(409, {"error": str(exc)})
        except (Validation, ValueError) as exc:
            self._send_json(400, {"error": str(exc)})

    def _serve_static(self, rel: str) -> None:
        if self.static_dir:
            path = os.path.normpath(os.path.join(self.static_dir, rel))
            if path.startswith(os.path.abspath(self.static_dir)) \
                    and os.path.isfile(path):
                ctype = {"html": "text/html", "js": "text/javascript",
                         "css": "text/css"}.get(path.rsplit(".", 1)[-1],
                                                "application/octet-stream")
                with open(path, "rb") as f:
                    return self._send(200, f.read(), ctype)
        self._send_json(404, {"error": f"no such resource /{rel}"})


def default_static_dir():
    """Bundled review UI, if the frontend build output is present."""
    here = os.path.dirname(os.path.abspath(__file__))
    for candidate in (
            os.path.join(here, "static"),
            os.path.join(here, "..", "..", "frontend", "dist"),
    ):
        candidate = os.path.abspath(candidate)
        if os.path.isdir(candidate):
            return candidate
    return None


def make_server(root, host: str = "127.0.0.1", port: int = 8008,
                static_dir: str = None) -> ThreadingHTTPServer:
    store = ReviewStore(root)
    handler = type("BoundHandler", (_Handler,), {
        "store": store,
        "static_dir": static_dir or default_static_dir(),
    })
    return ThreadingHTTPServer((host, port), handler)
