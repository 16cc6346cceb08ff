"""Anchor feature fusion: every Gaussian acts as a 3D query that gathers
LiDAR voxel features through an exponential distance kernel and
multi-view image tokens through geometry-guided sampling, aggregates the
tokens into codebook residuals, modulates them with the geometry
feature, fuses across pyramid levels with biased cross-attention, and
decodes updated Gaussian attributes with a small FFN.

All math runs on the autodiff tape; data-dependent structure (voxel
occupancy, visibility, neighbor sets) is recomputed in numpy each
forward pass and treated as constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import Camera
from .grids import GridSpec
from .scene import PointCloud

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
ROT_NORM_GUARD = 1e-8
FIXED_OFFSET_GRID = np.array([[dx, dy] for dy in (-0.5, 0.0, 0.5)
                              for dx in (-0.5, 0.0, 0.5)])


@dataclass
class FusionConfig:
    d_pc: int = 32                 # geometry feature width
    d_img: int = 32                # image feature width per level
    strides: tuple = (4, 8, 16, 32)
    n_offsets: int = 9
    sample_radius: tuple = (4.0, 8.0, 16.0, 32.0)  # feature-map pixels per level
    kappa: float = 1.0             # spatial weight bandwidth = kappa * radius
    n_codewords: int = 32
    context_scale: float = 1.5     # neighborhood radius = scale * mean(s)
    kernel_gamma: float = 3.0
    delta_max: float | None = 2.0  # center update bound, meters; None = unbounded
    scale_min: float = 0.05
    iterations: int = 1
    ggs_enabled: bool = True       # learned sampling offsets vs fixed 3x3 grid
    gvr_enabled: bool = True       # codebook resampling vs raw tokens
    points_per_voxel: int = 10
    offset_hidden: int = 32
    ffn_hidden: int = 128
    num_classes: int = 6

    @property
    def levels(self) -> int:
        return len(self.strides)

    def __post_init__(self):
        if len(self.sample_radius) != len(self.strides):
            raise ContractError("sample_radius must have one entry per stride")
        if self.points_per_voxel < 1:
            raise ContractError("points_per_voxel must be >= 1")


@dataclass
class SparseVoxelGrid:
    spec: GridSpec
    coords: np.ndarray         # (V, 3) int voxel coordinates, occupied only
    features: object           # (V, d) ndarray or tape Tensor

    @property
    def centers(self) -> np.ndarray:
        return np.asarray(self.spec.origin) + (self.coords + 0.5) * self.spec.voxel_size

    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class FeaturePyramid:
    """Per-view image features: one (H_l, W_l, d) map per level, strides
    strictly increasing."""
    maps: list                  # list of Tensor/ndarray maps, coarse last
    strides: tuple

    def __post_init__(self):
        if list(self.strides) != sorted(set(self.strides)):
            raise ContractError("strides must be strictly increasing")


# ---------------------------------------------------------------------------
# parameters

def _linear_init(rng, d_in, d_out):
    return rng.normal(size=(d_in, d_out)) / np.sqrt(d_in)


def make_fusion_params(cfg: FusionConfig, seed: int = 0) -> dict:
    """Fusion parameter tensors keyed by their checkpoint names."""
    rng = np.random.default_rng(seed)
    d, dp, M, L = cfg.d_img, cfg.d_pc, cfg.n_codewords, cfg.levels
    params = {
        "gaf.offset.w1": _linear_init(rng, dp, cfg.offset_hidden),
        "gaf.offset.b1": np.zeros(cfg.offset_hidden),
        "gaf.offset.w2": np.zeros((cfg.offset_hidden, cfg.n_offsets * 2)),
        "gaf.offset.b2": np.zeros(cfg.n_offsets * 2),
        "gaf.codebook": rng.normal(size=(M, d)) / np.sqrt(d),
        "gaf.Wa": _linear_init(rng, d, M),
        "gaf.Ua": _linear_init(rng, dp, M),
        "gaf.b": np.zeros(M),
        "gaf.Wz": _linear_init(rng, d, d),
        "gaf.film.w1": _linear_init(rng, dp, dp),
        "gaf.film.b1": np.zeros(dp),
        "gaf.film.w2": np.zeros((dp, 2 * d)),
        "gaf.film.b2": np.zeros(2 * d),
        "gaf.Wq": _linear_init(rng, dp, d),
        "gaf.lambda": np.zeros(L),
        "gaf.ffn.w1": _linear_init(rng, dp + d, cfg.ffn_hidden),
        "gaf.ffn.b1": np.zeros(cfg.ffn_hidden),
        "gaf.ffn.w2": np.zeros((cfg.ffn_hidden, 3 + 3 + 4 + cfg.num_classes)),
        "gaf.ffn.b2": np.zeros(3 + 3 + 4 + cfg.num_classes),
    }
    for l in range(L):
        params[f"gaf.Wk{l}"] = _linear_init(rng, d, d)
        params[f"gaf.Wv{l}"] = _linear_init(rng, d, d)
    return params


def make_backbone_params(cfg: FusionConfig, seed: int = 0) -> dict:
    """Strided convolutional pyramid: one patchify conv per level."""
    rng = np.random.default_rng(seed)
    params = {}
    d_prev, k = 3, cfg.strides[0]
    for l in range(cfg.levels):
        if l > 0:
            k = cfg.strides[l] // cfg.strides[l - 1]
            d_prev = cfg.d_img
        params[f"backbone.l{l}.w"] = _linear_init(rng, k * k * d_prev, cfg.d_img)
        params[f"backbone.l{l}.b"] = np.zeros(cfg.d_img)
    return params


def make_sparse_params(cfg: FusionConfig, seed: int = 0) -> dict:
    """Two submanifold 3x3x3 conv layers, identity-plus-noise init so the
    encoder starts near a pass-through."""
    rng = np.random.default_rng(seed)
    d = cfg.d_pc
    params = {}
    for layer in (1, 2):
        w = rng.normal(size=(27, d, d)) * (0.1 / np.sqrt(27 * d))
        w[13] += np.eye(d)  # center tap
        params[f"sparse.l{layer}.w"] = w
        params[f"sparse.l{layer}.b"] = np.zeros(d)
    return params


def bind(tape: ad.Tape, params: dict) -> dict:
    return {k: tape.leaf(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# voxel features

def voxelize(cloud: PointCloud, spec: GridSpec, points_per_voxel: int = 10,
             d_pc: int = 32) -> SparseVoxelGrid:
    """Average per-point embeddings [rel x, rel y, rel z, intensity, 1]
    over the first `points_per_voxel` points of each occupied voxel, then
    zero-pad to d_pc."""
    if points_per_voxel < 1:
        raise ContractError("points_per_voxel must be >= 1")
    if d_pc < 5:
        raise ContractError("d_pc must hold the 5 raw embedding channels")
    pts = cloud.world_points()
    idx, ok = spec.voxel_of(pts)
    pts, idx = pts[ok], idx[ok]
    inten = cloud.intensity[ok]
    if pts.shape[0] == 0:
        return SparseVoxelGrid(spec, np.zeros((0, 3), dtype=np.int64),
                               np.zeros((0, d_pc)))
    flat = spec.flat_index(idx)
    order = np.argsort(flat, kind="stable")  # keeps insertion order per voxel
    flat_s, idx_s, pts_s, int_s = flat[order], idx[order], pts[order], inten[order]
    uniq, starts, inverse = np.unique(flat_s, return_index=True, return_inverse=True)
    rank = np.arange(flat_s.shape[0]) - starts[inverse]
    keep = rank < points_per_voxel
    coords = idx_s[starts]
    centers = np.asarray(spec.origin) + (coords + 0.5) * spec.voxel_size
    rel = pts_s[keep] - centers[inverse[keep]]
    emb = np.concatenate([rel, int_s[keep, None], np.ones((keep.sum(), 1))], axis=1)
    sums = np.zeros((uniq.shape[0], 5))
    np.add.at(sums, inverse[keep], emb)
    counts = np.bincount(inverse[keep], minlength=uniq.shape[0])
    feats = np.zeros((uniq.shape[0], d_pc))
    feats[:, :5] = sums / counts[:, None]
    return SparseVoxelGrid(spec, coords, feats)


def _conv_edges(coords: np.ndarray):
    """For each of the 27 offsets, (output row, input row) index pairs
    between occupied sites."""
    lookup = {tuple(c): i for i, c in enumerate(coords)}
    edges = []
    for o, (dx, dy, dz) in enumerate([(a, b, c) for a in (-1, 0, 1)
                                      for b in (-1, 0, 1) for c in (-1, 0, 1)]):
        shifted = coords + np.array([dx, dy, dz])
        outs, ins = [], []
        for i, c in enumerate(shifted):
            j = lookup.get(tuple(c))
            if j is not None:
                outs.append(i)
                ins.append(j)
        edges.append((np.asarray(outs, dtype=np.int64),
                      np.asarray(ins, dtype=np.int64)))
    return edges


def submanifold_conv(grid: SparseVoxelGrid, weight, bias) -> SparseVoxelGrid:
    """3x3x3 convolution evaluated only at occupied sites; output sites
    equal input sites.  weight is (27, d_in, d_out), offset 13 is the
    center tap."""
    feats = ad._coerce(grid.features)
    weight_t = ad._coerce(weight)
    n = grid.coords.shape[0]
    d_out = weight_t.shape[2]
    edges = _conv_edges(grid.coords)
    total = None
    for o, (outs, ins) in enumerate(edges):
        if outs.size == 0:
            continue
        w_o = ad.reshape(ad.slice_(weight_t, (slice(o, o + 1),)),
                         (weight_t.shape[1], d_out))
        part = ad.segment_sum(ad.matmul(ad.gather_rows(feats, ins), w_o), outs, n)
        total = part if total is None else ad.add(total, part)
    if total is None:
        total = ad.constant(np.zeros((n, d_out)))
    out = ad.add(total, ad.broadcast_to(ad._coerce(bias), (n, d_out)))
    return SparseVoxelGrid(grid.spec, grid.coords, out)


def sparse_encode(grid: SparseVoxelGrid, params: dict) -> SparseVoxelGrid:
    """Two submanifold conv layers with GELU after each."""
    h = submanifold_conv(grid, params["sparse.l1.w"], params["sparse.l1.b"])
    h = SparseVoxelGrid(h.spec, h.coords, ad.gelu(h.features))
    h = submanifold_conv(h, params["sparse.l2.w"], params["sparse.l2.b"])
    return SparseVoxelGrid(h.spec, h.coords, ad.gelu(h.features))


# ---------------------------------------------------------------------------
# anchor geometry feature

def anchor_geometry_feature(mu, scale_vals, grid: SparseVoxelGrid,
                            context_scale: float = 1.5,
                            kernel_gamma: float = 3.0):
    """Distance-kernel mean of voxel features within radius k * mean(s)
    of each anchor.  Anchors with no occupied voxel in range get a zero
    feature.  Returns (features (N, d), has_neighbors mask)."""
    mu_t = ad._coerce(mu)
    n = mu_t.shape[0]
    d = grid.feature_dim()
    scale_vals = np.asarray(scale_vals, dtype=np.float64).reshape(n, 3)
    radius = context_scale * scale_vals.mean(axis=1)
    centers = grid.centers
    if centers.shape[0] == 0:
        return ad.constant(np.zeros((n, d))), np.zeros(n, dtype=bool)
    dist = np.linalg.norm(mu_t.array[:, None, :] - centers[None, :, :], axis=2)
    a_idx, v_idx = np.nonzero(dist <= radius[:, None])
    has = np.zeros(n, dtype=bool)
    has[a_idx] = True
    if a_idx.size == 0:
        return ad.constant(np.zeros((n, d))), has
    diff = ad.sub(ad.gather_rows(mu_t, a_idx), ad.constant(centers[v_idx]))
    dist_e = ad.sqrt(ad.sum_(ad.mul(diff, diff), axis=-1, keepdims=True) + 1e-18)
    w = ad.exp(ad.scale(dist_e, -kernel_gamma))
    feats_e = ad.gather_rows(ad._coerce(grid.features), v_idx)
    w_wide = ad.matmul(w, ad.constant(np.ones((1, d))))
    num = ad.segment_sum(ad.mul(feats_e, w_wide), a_idx, n)
    den = ad.segment_sum(w, a_idx, n)
    den_safe = ad.add(den, ad.constant((~has).astype(np.float64).reshape(n, 1)))
    out = ad.div(num, ad.matmul(den_safe, ad.constant(np.ones((1, d)))))
    return out, has


# ---------------------------------------------------------------------------
# projection and sampling

def project(mu, camera: Camera):
    """Pinhole projection of anchor centers.

    Returns (pix Tensor (N, 2), depth ndarray, in_frustum ndarray).  The
    pixel values of out-of-frustum anchors are finite but meaningless;
    callers must mask them out.
    """
    mu_t = ad._coerce(mu)
    n = mu_t.shape[0]
    ext = camera.extrinsics
    p_cam = ad.add(ad.matmul(mu_t, ad.constant(ext.rot.T)), ad.constant(ext.t))
    z = ad.slice_(p_cam, (slice(None), slice(2, 3)))
    depth = z.array.reshape(-1).copy()
    # keep the tape NaN-free for anchors at/behind the image plane
    adjust = np.where(np.abs(depth) < 1e-6, 1e-6 - depth, 0.0).reshape(n, 1)
    z_safe = ad.add(z, ad.constant(adjust))
    x = ad.div(ad.slice_(p_cam, (slice(None), slice(0, 1))), z_safe)
    y = ad.div(ad.slice_(p_cam, (slice(None), slice(1, 2))), z_safe)
    pix = ad.concat([ad.add(ad.scale(x, camera.fx), ad.constant(np.array([camera.cx]))),
                     ad.add(ad.scale(y, camera.fy), ad.constant(np.array([camera.cy])))],
                    axis=1)
    W, H = camera.image_size
    px = pix.array
    in_frustum = ((depth > 0.0) & (px[:, 0] >= 0.0) & (px[:, 0] <= W - 1.0)
                  & (px[:, 1] >= 0.0) & (px[:, 1] <= H - 1.0))
    return pix, depth, in_frustum


def sampling_offsets(f_pc, params: dict, cfg: FusionConfig) -> ad.Tensor:
    """Normalized 2D offsets in (-1, 1), shape (N, N_off, 2).

    Geometry-guided mode predicts them with a two-layer MLP conditioned
    on the anchor geometry feature; otherwise a fixed 3x3 grid is used.
    """
    f_t = ad._coerce(f_pc)
    n = f_t.shape[0]
    if not cfg.ggs_enabled:
        fixed = np.broadcast_to(FIXED_OFFSET_GRID, (n, 9, 2)).copy()
        return ad._coerce(fixed)
    h = ad.gelu(ad.add(ad.matmul(f_t, ad._coerce(params["gaf.offset.w1"])),
                       ad._coerce(params["gaf.offset.b1"])))
    raw = ad.add(ad.matmul(h, ad._coerce(params["gaf.offset.w2"])),
                 ad._coerce(params["gaf.offset.b2"]))
    return ad.reshape(ad.tanh(raw), (n, cfg.n_offsets, 2))


def guided_sample_locations(pix, offsets, level: int, cfg: FusionConfig) -> ad.Tensor:
    """Map-space sampling locations pix/s_l + offset * R_l, (N, N_off, 2).
    Border clamping happens inside the bilinear lookup."""
    pix_t = ad._coerce(pix)
    n, n_off = offsets.shape[0], offsets.shape[1]
    base = ad.reshape(ad.scale(pix_t, 1.0 / cfg.strides[level]), (n, 1, 2))
    base_wide = ad.bmm(ad.constant(np.ones((n, n_off, 1))), base)
    return ad.add(base_wide, ad.scale(offsets, cfg.sample_radius[level]))


def bilinear_sample(feature_map, locations) -> ad.Tensor:
    """Bilinear token lookup on an (H, W, d) map at (N, 2) x/y locations."""
    return ad.bilinear2d(feature_map, locations)


# ---------------------------------------------------------------------------
# token aggregation

def _expand_last(x, m):
    """(N, T, 1) -> (N, T, m) via a batched outer product."""
    n, t = x.shape[0], x.shape[1]
    return ad.bmm(x, ad.constant(np.ones((n, 1, m))), transpose_b=False) \
        if x.shape[2] == 1 and False else ad.bmm(x, ad.constant(np.ones((n, 1, m))))


def vlad_assignments(tokens, f_pc, params: dict) -> ad.Tensor:
    """Soft codeword assignments, softmax over M per token: (N, T, M)."""
    tok = ad._coerce(tokens)
    n, t, d = tok.shape
    m = params["gaf.codebook"].shape[0] if not isinstance(params["gaf.codebook"], ad.Tensor) \
        else params["gaf.codebook"].shape[0]
    flat = ad.reshape(tok, (n * t, d))
    logits = ad.reshape(ad.matmul(flat, ad._coerce(params["gaf.Wa"])), (n, t, m))
    cond = ad.reshape(ad.add(ad.matmul(ad._coerce(f_pc), ad._coerce(params["gaf.Ua"])),
                             ad._coerce(params["gaf.b"])), (n, 1, m))
    cond_wide = ad.bmm(ad.constant(np.ones((n, t, 1))), cond)
    return ad.softmax(ad.add(logits, cond_wide))


def geo_vlad(tokens, f_pc, token_weights, params: dict, alpha=None):
    """Weighted codeword residual aggregation.

    tokens (N, T, d), token_weights (N, T, 1) fold in both the spatial
    weights and the visibility mask; zero-weight tokens drop out of the
    residual sums exactly.  Returns (Z (N, M, d), alpha (N, T, M)).
    """
    tok = ad._coerce(tokens)
    n, t, d = tok.shape
    if alpha is None:
        alpha = vlad_assignments(tok, f_pc, params)
    m = alpha.shape[2]
    tw = ad._coerce(token_weights)
    alpha_w = ad.mul(alpha, ad.bmm(tw, ad.constant(np.ones((n, 1, m)))))
    summed = ad.bmm(alpha_w, tok, transpose_a=True)            # (N, M, d)
    mass = ad.sum_(alpha_w, axis=1, keepdims=False)            # (N, M)
    mass_wide = ad.bmm(ad.reshape(mass, (n, m, 1)), ad.constant(np.ones((n, 1, d))))
    codebook = ad.broadcast_to(ad._coerce(params["gaf.codebook"]), (n, m, d))
    residual = ad.sub(summed, ad.mul(mass_wide, codebook))
    normed = ad.l2_normalize(residual)
    z = ad.reshape(ad.matmul(ad.reshape(normed, (n * m, d)),
                             ad._coerce(params["gaf.Wz"])), (n, m, d))
    return z, alpha


def film(z, f_pc, params: dict) -> ad.Tensor:
    """Feature-wise scale and shift predicted from the geometry feature;
    the zero-initialized head makes this the identity at start."""
    z_t = ad._coerce(z)
    n, m, d = z_t.shape
    h = ad.gelu(ad.add(ad.matmul(ad._coerce(f_pc), ad._coerce(params["gaf.film.w1"])),
                       ad._coerce(params["gaf.film.b1"])))
    gb = ad.add(ad.matmul(h, ad._coerce(params["gaf.film.w2"])),
                ad._coerce(params["gaf.film.b2"]))
    gamma = ad.add(ad.slice_(gb, (slice(None), slice(0, d))), ad.constant(np.ones((n, d))))
    beta = ad.slice_(gb, (slice(None), slice(d, 2 * d)))
    ones_m = ad.constant(np.ones((n, m, 1)))
    gamma_w = ad.bmm(ones_m, ad.reshape(gamma, (n, 1, d)))
    beta_w = ad.bmm(ones_m, ad.reshape(beta, (n, 1, d)))
    return ad.add(ad.mul(gamma_w, z_t), beta_w)


def fused_attention(f_pc, per_level_slots, per_level_bias, visible_any,
                    params: dict, cfg: FusionConfig) -> ad.Tensor:
    """Per level: one-query cross-attention over the slots with a log
    spatial bias; levels combined with softmax-normalized weights.
    Anchors visible in no view get a zero fused feature.
    """
    f_t = ad._coerce(f_pc)
    n = f_t.shape[0]
    d = cfg.d_img
    q = ad.reshape(ad.matmul(f_t, ad._coerce(params["gaf.Wq"])), (n, 1, d))
    lam = ad.softmax(ad.reshape(ad._coerce(params["gaf.lambda"]), (1, cfg.levels)))
    vis = visible_any.astype(np.float64).reshape(n, 1)
    out = None
    for l, (slots, bias) in enumerate(zip(per_level_slots, per_level_bias)):
        m = slots.shape[1]
        keys = ad.reshape(ad.matmul(ad.reshape(slots, (n * m, d)),
                                    ad._coerce(params[f"gaf.Wk{l}"])), (n, m, d))
        vals = ad.reshape(ad.matmul(ad.reshape(slots, (n * m, d)),
                                    ad._coerce(params[f"gaf.Wv{l}"])), (n, m, d))
        scores = ad.scale(ad.bmm(q, keys, transpose_b=True), 1.0 / np.sqrt(d))
        scores = ad.add(scores, ad.reshape(ad.log(bias), (n, 1, m)))
        att = ad.reshape(ad.bmm(ad.softmax(scores), vals), (n, d))
        lam_l = ad.slice_(lam, (slice(None), slice(l, l + 1)))
        term = ad.mul(att, ad.broadcast_to(lam_l, (n, d)))
        out = term if out is None else ad.add(out, term)
    return ad.mul(out, ad.matmul(ad.constant(vis), ad.constant(np.ones((1, d)))))


def update_gaussian(f_pc, f_img, mu, params: dict, cfg: FusionConfig):
    """Decode updated attributes from the fused features.

    The center moves by a tanh-bounded residual; scales go through
    softplus plus a floor; the rotation is the normalized raw quaternion
    with an identity fallback for vanishing norms; semantics are raw
    logits.
    """
    fused = ad.concat([ad._coerce(f_pc), ad._coerce(f_img)], axis=1)
    h = ad.gelu(ad.add(ad.matmul(fused, ad._coerce(params["gaf.ffn.w1"])),
                       ad._coerce(params["gaf.ffn.b1"])))
    raw = ad.add(ad.matmul(h, ad._coerce(params["gaf.ffn.w2"])),
                 ad._coerce(params["gaf.ffn.b2"]))
    n = raw.shape[0]
    c = cfg.num_classes
    raw_mu = ad.slice_(raw, (slice(None), slice(0, 3)))
    raw_s = ad.slice_(raw, (slice(None), slice(3, 6)))
    raw_r = ad.slice_(raw, (slice(None), slice(6, 10)))
    raw_c = ad.slice_(raw, (slice(None), slice(10, 10 + c)))
    if cfg.delta_max is None:
        delta = raw_mu
    else:
        delta = ad.scale(ad.tanh(ad.scale(raw_mu, 1.0 / cfg.delta_max)), cfg.delta_max)
    mu_new = ad.add(ad._coerce(mu), delta)
    scale_new = ad.add(ad.softplus(raw_s), ad.constant(np.full(3, cfg.scale_min)))
    norms = np.linalg.norm(raw_r.array, axis=1, keepdims=True)
    ok = (norms >= ROT_NORM_GUARD).astype(np.float64)
    fallback = (1.0 - ok) * IDENTITY_QUAT
    rot_new = ad.add(ad.mul(ad.l2_normalize(raw_r), ad.constant(np.tile(ok, (1, 4)))),
                     ad.constant(fallback))
    return mu_new, scale_new, rot_new, raw_c


# ---------------------------------------------------------------------------
# image backbone

def _patch_indices(h, w, k):
    """im2col row indices for a stride-k, kernel-k patchify: (h/k * w/k, k*k)."""
    oh, ow = h // k, w // k
    py, px = np.meshgrid(np.arange(oh) * k, np.arange(ow) * k, indexing="ij")
    base = (py * w + px).reshape(-1, 1)
    dy, dx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    delta = (dy * w + dx).reshape(1, -1)
    return base + delta


def conv_pyramid(image, params: dict, cfg: FusionConfig) -> FeaturePyramid:
    """Trainable strided-convolution pyramid over one (H, W, 3) image."""
    img = ad._coerce(image)
    h, w, _ = img.shape
    if h % cfg.strides[-1] or w % cfg.strides[-1]:
        raise ContractError("image dims must be divisible by the largest stride")
    maps = []
    cur = ad.reshape(img, (h * w, 3))
    cur_h, cur_w, d_in = h, w, 3
    for l in range(cfg.levels):
        k = cfg.strides[l] if l == 0 else cfg.strides[l] // cfg.strides[l - 1]
        idx = _patch_indices(cur_h, cur_w, k)
        gathered = ad.reshape(ad.gather_rows(cur, idx.reshape(-1)),
                              (idx.shape[0], k * k * d_in))
        out = ad.gelu(ad.add(ad.matmul(gathered, ad._coerce(params[f"backbone.l{l}.w"])),
                             ad._coerce(params[f"backbone.l{l}.b"])))
        cur_h, cur_w, d_in = cur_h // k, cur_w // k, cfg.d_img
        maps.append(ad.reshape(out, (cur_h, cur_w, cfg.d_img)))
        cur = out
    return FeaturePyramid(maps, cfg.strides)


# ---------------------------------------------------------------------------
# full per-anchor fusion pass

def _scatter_rows(rows, positions, total, width):
    """Place (K, width) rows at the given positions of a zero (total, width)
    tensor; positions are unique."""
    return ad.segment_sum(rows, positions, total)


def fusion_forward(mu, scale_vals, voxel_grid: SparseVoxelGrid, pyramids,
                   cameras, params: dict, cfg: FusionConfig):
    """One refinement pass over all anchors.

    Returns (mu_new, scale_new, rot_new, sem_new, info) where info
    carries the token accounting used by the tests.
    """
    mu_t = ad._coerce(mu)
    n = mu_t.shape[0]
    if len(pyramids) != len(cameras):
        raise ContractError("one pyramid per camera required")
    for pyr in pyramids:
        if len(pyr.maps) != cfg.levels:
            raise ContractError("pyramid level count mismatch")
        if pyr.maps[0].shape[2] != cfg.d_img:
            raise ContractError("pyramid width mismatch")
    if voxel_grid.feature_dim() != cfg.d_pc:
        raise ContractError("voxel feature width mismatch")

    f_pc, _ = anchor_geometry_feature(mu_t, scale_vals, voxel_grid,
                                      cfg.context_scale, cfg.kernel_gamma)
    offsets = sampling_offsets(f_pc, params, cfg)
    n_off = offsets.shape[1]

    projections = [project(mu_t, cam) for cam in cameras]
    visible_any = np.zeros(n, dtype=bool)
    for _, _, vis in projections:
        visible_any |= vis
    token_count = 0

    per_level_slots, per_level_bias = [], []
    inv_two_kappa_sq = 1.0 / (2.0 * cfg.kappa ** 2)
    for l in range(cfg.levels):
        view_tokens, view_weights, view_masks = [], [], []
        for v, cam in enumerate(cameras):
            pix, _, vis = projections[v]
            vis_idx = np.nonzero(vis)[0]
            rows_total = n * n_off
            if vis_idx.size == 0:
                view_tokens.append(ad.constant(np.zeros((rows_total, cfg.d_img))))
                view_weights.append(ad.constant(np.zeros((rows_total, 1))))
                view_masks.append(np.zeros(rows_total))
                continue
            token_count += vis_idx.size * n_off
            pix_vis = ad.gather_rows(pix, vis_idx)
            off_vis = ad.gather_rows(offsets, vis_idx)
            locs = guided_sample_locations(pix_vis, off_vis, l, cfg)
            locs_flat = ad.reshape(locs, (vis_idx.size * n_off, 2))
            toks = bilinear_sample(pyramids[v].maps[l], locs_flat)
            off_sq = ad.sum_(ad.mul(off_vis, off_vis), axis=2, keepdims=False)
            w_sp = ad.exp(ad.scale(ad.reshape(off_sq, (vis_idx.size * n_off, 1)),
                                   -inv_two_kappa_sq))
            positions = (vis_idx[:, None] * n_off + np.arange(n_off)).reshape(-1)
            view_tokens.append(_scatter_rows(toks, positions, rows_total, cfg.d_img))
            view_weights.append(_scatter_rows(w_sp, positions, rows_total, 1))
            mask = np.zeros(rows_total)
            mask[positions] = 1.0
            view_masks.append(mask)
        t_level = len(cameras) * n_off
        tokens = ad.reshape(ad.concat(
            [ad.reshape(vt, (n, n_off, cfg.d_img)) for vt in view_tokens], axis=1),
            (n, t_level, cfg.d_img))
        weights = ad.reshape(ad.concat(
            [ad.reshape(vw, (n, n_off, 1)) for vw in view_weights], axis=1),
            (n, t_level, 1))
        mask = np.concatenate([vm.reshape(n, n_off) for vm in view_masks],
                              axis=1).reshape(n, t_level, 1)
        weights = ad.mul(weights, ad.constant(mask))

        if cfg.gvr_enabled:
            alpha = vlad_assignments(tokens, f_pc, params)
            z, alpha = geo_vlad(tokens, f_pc, weights, params, alpha=alpha)
            alpha_m = ad.mul(alpha, ad.bmm(ad.constant(mask),
                                           ad.constant(np.ones((n, 1, cfg.n_codewords)))))
            bias_num = ad.sum_(ad.mul(alpha_m, ad.bmm(
                weights, ad.constant(np.ones((n, 1, cfg.n_codewords))))), axis=1)
            bias_den = ad.sum_(alpha_m, axis=1)
            empty = (bias_den.array <= 1e-12).astype(np.float64)
            bias = ad.div(ad.add(bias_num, ad.constant(empty)),
                          ad.add(bias_den, ad.constant(empty)))
            slots = film(z, f_pc, params)
        else:
            slots = film(tokens, f_pc, params)
            floor = (mask.reshape(n, t_level) <= 0).astype(np.float64)
            bias = ad.add(ad.mul(ad.reshape(weights, (n, t_level)),
                                 ad.constant(mask.reshape(n, t_level))),
                          ad.constant(np.maximum(floor, 1e-12)))
        per_level_slots.append(slots)
        per_level_bias.append(bias)

    f_img = fused_attention(f_pc, per_level_slots, per_level_bias, visible_any,
                            params, cfg)
    mu_new, scale_new, rot_new, sem_new = update_gaussian(f_pc, f_img, mu_t,
                                                          params, cfg)
    info = {"token_count": token_count, "visible_any": visible_any}
    return mu_new, scale_new, rot_new, sem_new, info
