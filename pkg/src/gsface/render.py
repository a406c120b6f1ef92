"""CPU reference rasterizer for 3D Gaussians, plus PSNR / SSIM and image I/O.

Projection uses the usual EWA linearisation of the pinhole camera.  A Gaussian's
screen footprint is its 3-sigma ellipse (Mahalanobis distance <= 3); blending
weights are clamped at 0.99 and composited front to back over a background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .avatar import ComposedGaussians

Z_NEAR = 0.01
ALPHA_CLAMP = 0.99
CUTOFF_SIGMA = 3.0
MAX_CONDITION = 1e12
PSNR_CAP = 99.0
DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
    -0.4570457994644658, 1.445305721320277, -0.5900435899266435,
)


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray      # world -> camera, 3 x 3
    translation: np.ndarray   # 3
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or np.linalg.det(rot) < 0:
            raise ValueError("camera rotation must be orthonormal and proper")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1 x 1")

    @property
    def centre(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions (w, x, y, z) to (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def covariance(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T for (..., 4) unit quaternions and (..., 3) positive scales."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(r, axis=-1) - 1) > 1e-4):
        raise ValueError("rotation quaternion is not unit length")
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    m = quat_to_rotmat(r) * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class Projection:
    mean2: np.ndarray   # N x 2 pixel coordinates
    cov2: np.ndarray    # N x 2 x 2
    depth: np.ndarray   # N camera-space z
    visible: np.ndarray  # N bool, False where z <= z_near


def project_many(means: np.ndarray, covs: np.ndarray, cam: Camera) -> Projection:
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    pc = means @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    visible = z > Z_NEAR
    zs = np.where(visible, z, 1.0)
    x, y = pc[:, 0], pc[:, 1]
    mean2 = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    jac = np.zeros((len(means), 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / zs**2
    t = jac @ cam.rotation
    cov2 = t @ covs @ np.swapaxes(t, -1, -2)
    return Projection(mean2, cov2, z, visible)


def project(mu: np.ndarray, cov: np.ndarray, cam: Camera):
    """(mean2, cov2, depth) for one point, or None when it lies behind z_near."""
    p = project_many(mu, cov, cam)
    if not p.visible[0]:
        return None
    return p.mean2[0], p.cov2[0], float(p.depth[0])


def eval_sh(h_base: np.ndarray, h_rest: np.ndarray, dirs: np.ndarray, degree: int = 1) -> np.ndarray:
    """RGB from real SH coefficients, clamped to [0, 1].

    ``h_base`` is (N, 3); ``h_rest`` is (N, 3 * ((degree+1)^2 - 1)) laid out
    coefficient-major with channels innermost.  ``dirs`` are unit (N, 3).
    """
    h_base = np.asarray(h_base, dtype=np.float64).reshape(-1, 3)
    n = h_base.shape[0]
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    rgb = SH_C0 * h_base
    if degree > 0:
        rest = np.asarray(h_rest, dtype=np.float64).reshape(n, -1, 3)
        basis = sh_basis(dirs, degree)[:, 1:]
        rgb = rgb + np.einsum("nk,nkc->nc", basis, rest[:, : basis.shape[1]])
    return np.clip(rgb, 0.0, 1.0)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """(N, (degree+1)^2) real SH basis values in the common graphics sign convention."""
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in [0, 3]")
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if degree > 0:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z, SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z, SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(cols, axis=1)


@dataclass
class SplatScene:
    """Screen-space quantities shared by the tiled rasterizer and the brute-force reference."""
    mean2: np.ndarray
    conic: np.ndarray    # N x 3 (a, b, c) of the inverse 2D covariance
    cov2: np.ndarray
    alpha: np.ndarray
    colors: np.ndarray
    order: np.ndarray    # indices into the arrays above, front to back
    n_culled: int
    n_skipped: int


def prepare(g: ComposedGaussians, cam: Camera) -> SplatScene:
    n = len(g)
    if n == 0:
        empty = np.zeros((0,))
        return SplatScene(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 2, 2)), empty, np.zeros((0, 3)),
                          np.zeros(0, dtype=np.int64), 0, 0)
    covs = covariance(g.quats, g.scales)
    proj = project_many(g.means, covs, cam)
    cov2 = proj.cov2
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    # 2x2 symmetric eigenvalues for the conditioning test
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    lam_max, lam_min = half_tr + disc, half_tr - disc
    ok = proj.visible & (det > 0) & (lam_min > 0)
    ok &= lam_max <= MAX_CONDITION * np.where(lam_min > 0, lam_min, 1.0)
    n_culled = int(np.sum(~proj.visible))
    n_skipped = int(np.sum(proj.visible & ~ok))
    safe_det = np.where(ok, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    dirs = g.means - cam.centre
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    colors = eval_sh(g.h_base, g.h_rest, dirs, g.sh_degree)
    idx = np.flatnonzero(ok)
    order = idx[np.lexsort((idx, proj.depth[idx]))]
    return SplatScene(proj.mean2, conic, cov2, np.asarray(g.alpha, dtype=np.float64), colors, order,
                      n_culled, n_skipped)


@dataclass
class RenderResult:
    image: np.ndarray            # H x W x 3
    foreground_weight: np.ndarray  # H x W, sum of blending weights
    transmittance: np.ndarray    # H x W, what the background receives
    n_culled: int = 0
    n_skipped: int = 0


def _footprint(scene: SplatScene, gid: np.ndarray, width: int, height: int):
    """Pixel bounding boxes of the 3-sigma ellipses (inclusive ranges, maybe empty)."""
    ext_x = CUTOFF_SIGMA * np.sqrt(scene.cov2[gid, 0, 0])
    ext_y = CUTOFF_SIGMA * np.sqrt(scene.cov2[gid, 1, 1])
    mx, my = scene.mean2[gid, 0], scene.mean2[gid, 1]
    # pixel centres sit at integer + 0.5
    x0 = np.clip(np.ceil(mx - ext_x - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(mx + ext_x - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(my - ext_y - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(my + ext_y - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    return x0, y0, nx, ny


def rasterize(
    g: ComposedGaussians,
    cam: Camera,
    background=DEFAULT_BACKGROUND,
    max_fragments: int = 1 << 22,
) -> RenderResult:
    """Depth-sorted alpha compositing of projected Gaussians.

    Gaussians are visited front to back in batches; each batch is expanded
    into (pixel, Gaussian) fragments over the Gaussians' footprint boxes, and
    fragments are composited depth layer by depth layer, so every pixel sees
    the same sequence of floating-point operations as a per-pixel loop.
    Output does not depend on the batch size.
    """
    w, h = cam.width, cam.height
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    scene = prepare(g, cam)
    trans = np.ones(w * h)
    accum = np.zeros((w * h, 3))
    weight = np.zeros(w * h)

    order = scene.order
    if order.size:
        x0, y0, nx, ny = _footprint(scene, order, w, h)
        counts = nx * ny
        start = 0
        while start < order.size:
            # grow the batch until the fragment budget is reached (always >= 1 Gaussian)
            csum = np.cumsum(counts[start:])
            stop = start + max(1, int(np.searchsorted(csum, max_fragments, side="right")))
            _composite_batch(scene, order[start:stop], x0[start:stop], y0[start:stop], nx[start:stop],
                             ny[start:stop], w, trans, accum, weight)
            start = stop

    image = accum + trans[:, None] * bg
    return RenderResult(
        np.clip(image, 0.0, 1.0).reshape(h, w, 3),
        weight.reshape(h, w),
        trans.reshape(h, w),
        scene.n_culled,
        scene.n_skipped,
    )


def _composite_batch(scene, gids, x0, y0, nx, ny, width, trans, accum, weight):
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return
    rank = np.repeat(np.arange(gids.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_r = nx[rank]
    px = x0[rank] + local % nx_r
    py = y0[rank] + local // nx_r
    gid = gids[rank]
    dx = px + 0.5 - scene.mean2[gid, 0]
    dy = py + 0.5 - scene.mean2[gid, 1]
    con = scene.conic[gid]
    power = con[:, 0] * dx * dx + 2.0 * con[:, 1] * dx * dy + con[:, 2] * dy * dy
    inside = power <= CUTOFF_SIGMA**2
    pix = (py * width + px)[inside]
    gid = gid[inside]
    a = np.minimum(ALPHA_CLAMP, scene.alpha[gid] * np.exp(-0.5 * power[inside]))
    if pix.size == 0:
        return
    # stable sort keeps the front-to-back order within each pixel
    perm = np.argsort(pix, kind="stable")
    pix, gid, a = pix[perm], gid[perm], a[perm]
    seg_start = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
    seg_len = np.diff(np.r_[seg_start, pix.size])
    depth_rank = np.arange(pix.size) - np.repeat(seg_start, seg_len)
    # layer k holds the k-th fragment of every pixel; pixels are unique within a layer,
    # so the per-pixel recurrence runs in exactly the sequential order
    by_layer = np.argsort(depth_rank, kind="stable")
    layer_sizes = np.bincount(depth_rank)
    start = 0
    for size in layer_sizes:
        sel = by_layer[start:start + size]
        start += size
        p, ak = pix[sel], a[sel]
        wgt = ak * trans[p]
        accum[p] += wgt[:, None] * scene.colors[gid[sel]]
        weight[p] += wgt
        trans[p] = trans[p] * (1.0 - ak)


def render_reference(g: ComposedGaussians, cam: Camera, background=DEFAULT_BACKGROUND) -> RenderResult:
    """Brute-force per-pixel compositing: every Gaussian against every pixel, no binning."""
    w, h = cam.width, cam.height
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    scene = prepare(g, cam)
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    trans = np.ones(w * h)
    accum = np.zeros((w * h, 3))
    weight = np.zeros(w * h)
    for i in scene.order:
        dx = px - scene.mean2[i, 0]
        dy = py - scene.mean2[i, 1]
        a_, b_, c_ = scene.conic[i]
        power = a_ * dx * dx + 2.0 * b_ * dx * dy + c_ * dy * dy
        alpha = np.where(power <= CUTOFF_SIGMA**2, np.minimum(ALPHA_CLAMP, scene.alpha[i] * np.exp(-0.5 * power)), 0.0)
        wgt = alpha * trans
        accum += wgt[:, None] * scene.colors[i]
        weight += wgt
        trans = trans * (1.0 - alpha)
    image = accum + trans[:, None] * bg
    return RenderResult(np.clip(image, 0, 1).reshape(h, w, 3), weight.reshape(h, w), trans.reshape(h, w),
                        scene.n_culled, scene.n_skipped)


# -- metrics -----------------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    rows = np.lib.stride_tricks.sliding_window_view(img, k.size, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(rows, k.size, axis=1) @ k


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of the luminance channel, 11x11 Gaussian window (sigma 1.5), valid region."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < 11:
        raise ValueError("SSIM needs images of at least 11 x 11 pixels")
    x, y = luminance(a), luminance(b)
    win = _gaussian_window()
    c1, c2 = k1**2, k2**2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# -- image I/O ---------------------------------------------------------------

_RAW_HEAD = struct.Struct("<4sII")


def save_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    data = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_raw(image: np.ndarray, path: str | Path) -> None:
    """Planar little-endian float32 dump: 'GFIM', width, height, then R, G, B planes."""
    image = np.asarray(image)
    h, w, _ = image.shape
    planes = np.ascontiguousarray(image.transpose(2, 0, 1), dtype="<f4")
    Path(path).write_bytes(_RAW_HEAD.pack(b"GFIM", w, h) + planes.tobytes())


def load_raw(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h = _RAW_HEAD.unpack_from(data, 0)
    if magic != b"GFIM" or len(data) != _RAW_HEAD.size + 12 * w * h:
        raise ValueError(f"{path} is not a raw GFIM image")
    planes = np.frombuffer(data, "<f4", offset=_RAW_HEAD.size).reshape(3, h, w)
    return planes.transpose(1, 2, 0).astype(np.float64)
