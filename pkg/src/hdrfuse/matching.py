"""Coarse-to-fine patch correspondence between two feature pyramids.

The search runs on the coarsest level over a wide window centered at
each target position, then propagates every best match down one dyadic
level (doubling its coordinates) and refines inside a small window.
Scores are inner products of patch vectors; two normalizations are
supported:

* ``cosine``        both the target patch and every candidate patch are
                    scaled to unit L2 norm;
* ``target_sqnorm`` only the target patch is scaled, by its squared L2
                    norm, candidates stay raw (argmax over candidates is
                    then dominated by high-energy patches).

Ties are broken by the smallest squared displacement from the target
position, then by row-major order of the source position, which makes
every result deterministic.  ``brute_force_match`` is an independent
numpy implementation of the same contract used as a test oracle.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "WindowSpec",
    "MatchField",
    "similarity_map",
    "match_coarsest",
    "refine_level",
    "progressive_match",
    "single_scale_match",
    "identity_match",
    "brute_force_match",
    "swap_features",
    "swap_level_features",
]

_NORMALIZATIONS = ("cosine", "target_sqnorm")
_TINY = 1e-30
_CHUNK_BUDGET = 4_000_000  # patch-vector floats held per chunk


@dataclass(frozen=True)
class WindowSpec:
    """Search geometry, indexed by pyramid level (0 = finest).

    The coarsest window carries the global search; refinement windows
    only need to absorb propagation error between levels.
    """

    radii: tuple = (2, 2, 8)
    patch_sizes: tuple = (3, 3, 3)
    stride: int = 1

    def __post_init__(self):
        if len(self.radii) != 3 or len(self.patch_sizes) != 3:
            raise ValueError("radii and patch_sizes need one entry per pyramid level")
        if any(r < 0 for r in self.radii):
            raise ValueError(f"window radii must be non-negative, got {self.radii}")
        if any(p < 1 or p % 2 == 0 for p in self.patch_sizes):
            raise ValueError(f"patch sizes must be odd and positive, got {self.patch_sizes}")
        if self.stride < 1:
            raise ValueError(f"stride must be at least 1, got {self.stride}")


@dataclass
class MatchField:
    """Per-level best-match positions and scores (finest level first)."""

    j_rows: list  # of int64 arrays (h_l, w_l)
    j_cols: list
    scores: list  # of float64 arrays (h_l, w_l)
    clamped: list = field(default_factory=lambda: [None, None, None])

    def __post_init__(self):
        if not (len(self.j_rows) == len(self.j_cols) == len(self.scores) == 3):
            raise ValueError("a MatchField holds exactly three levels")

    def displacement(self, level):
        h, w = self.j_rows[level].shape
        kr, kc = np.mgrid[0:h, 0:w]
        return self.j_rows[level] - kr, self.j_cols[level] - kc

    def iter_rows(self):
        """(level, k_row, k_col, j_row, j_col, score) tuples for debug dumps."""
        for level in range(3):
            jr, jc, sc = self.j_rows[level], self.j_cols[level], self.scores[level]
            for kr in range(jr.shape[0]):
                for kc in range(jr.shape[1]):
                    yield level, kr, kc, int(jr[kr, kc]), int(jc[kr, kc]), float(sc[kr, kc])


def _as_level(level, name):
    arr = np.asarray(level)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (C, h, w), got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))


def _padded(level_t, pad):
    if pad == 0:
        return level_t
    return F.pad(level_t[None], (pad, pad, pad, pad), mode="replicate")[0]


def _gather_patches(padded, rows, cols, patch):
    """Patch vectors centered at (rows, cols); padded is (C, h+2p, w+2p)."""
    pieces = []
    for pr in range(patch):
        for pc in range(patch):
            pieces.append(padded[:, rows + pr, cols + pc])
    return torch.cat(pieces, dim=0).T  # (n, C * patch * patch)


def similarity_map(source_level, target_patch, center, radius, normalization="cosine"):
    """Scores of one target patch against a window of source candidates.

    Returns a (2*radius+1, 2*radius+1) float64 array (offset grid around
    `center`, out-of-extent candidates -inf) and a degenerate flag that
    is set when the target patch has zero norm (scores all zero then).
    """
    if normalization not in _NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {_NORMALIZATIONS}")
    src = _as_level(source_level, "source level")
    tgt_arr = np.asarray(target_patch, dtype=np.float64)
    if tgt_arr.ndim != 3 or tgt_arr.shape[0] != src.shape[0]:
        raise ValueError("target patch must be C x p x p matching the source channels")
    patch = tgt_arr.shape[1]
    if tgt_arr.shape[1] != tgt_arr.shape[2] or patch % 2 == 0:
        raise ValueError("target patch must be square with odd side")
    # (pr, pc, channel) ordering, matching the gathered candidate vectors
    tgt = tgt_arr.transpose(1, 2, 0).reshape(-1)
    norm_sq = float(np.dot(tgt, tgt))
    degenerate = norm_sq <= _TINY
    if degenerate:
        return np.zeros((2 * radius + 1, 2 * radius + 1)), True

    if normalization == "cosine":
        tgt = tgt / np.sqrt(norm_sq)
    else:
        tgt = tgt / norm_sq
    pad = patch // 2
    padded = _padded(src, pad)
    _, h, w = src.shape
    cr, cc = center
    out = np.full((2 * radius + 1, 2 * radius + 1), -np.inf)
    for i, dr in enumerate(range(-radius, radius + 1)):
        for j, dc in enumerate(range(-radius, radius + 1)):
            r, c = cr + dr, cc + dc
            if not (0 <= r < h and 0 <= c < w):
                continue
            cand = _gather_patches(padded, torch.tensor([r]), torch.tensor([c]), patch)[0].numpy()
            if normalization == "cosine":
                n = np.linalg.norm(cand)
                cand = cand / n if n > _TINY else cand * 0.0
            out[i, j] = float(np.dot(tgt, cand))
    return out, False


def _patch_norms(padded, patch, h, w):
    """L2 norm of the patch vector centered at every position, (h, w)."""
    sq = (padded**2).sum(dim=0, keepdim=True)[None]
    sums = F.avg_pool2d(sq, patch, stride=1) * float(patch * patch)
    return torch.sqrt(torch.clamp(sums[0, 0, :h, :w], min=0.0))


def _dense_match(src_p, tgt_p, patch, hs, ws, ht, wt, normalization):
    """Argmax over every source position (the full-window fast path)."""
    all_r = torch.from_numpy(np.repeat(np.arange(hs, dtype=np.int64), ws))
    all_c = torch.from_numpy(np.tile(np.arange(ws, dtype=np.int64), hs))
    smat = _gather_patches(src_p, all_r, all_c, patch)
    if normalization == "cosine":
        smat = smat / torch.clamp(smat.norm(dim=1), min=_TINY)[:, None]
    kr = torch.from_numpy(np.repeat(np.arange(ht, dtype=np.int64), wt))
    kc = torch.from_numpy(np.tile(np.arange(wt, dtype=np.int64), ht))

    n_pos = ht * wt
    dim = smat.shape[1]
    chunk = max(1, _CHUNK_BUDGET // max(hs * ws, dim))
    best_score = np.empty(n_pos)
    best_jr = np.empty(n_pos, dtype=np.int64)
    best_jc = np.empty(n_pos, dtype=np.int64)
    big = torch.tensor(2**62, dtype=torch.int64)
    for lo in range(0, n_pos, chunk):
        hi = min(lo + chunk, n_pos)
        tmat = _gather_patches(tgt_p, kr[lo:hi], kc[lo:hi], patch)
        tnorm = tmat.norm(dim=1)
        if normalization == "cosine":
            tmat = tmat / torch.clamp(tnorm, min=_TINY)[:, None]
        else:
            tmat = tmat / torch.clamp(tnorm**2, min=_TINY)[:, None]
        scores = tmat @ smat.T  # (chunk, hs*ws)
        scores[tnorm <= _TINY] = 0.0
        d2 = (all_r[None, :] - kr[lo:hi, None]) ** 2 + (all_c[None, :] - kc[lo:hi, None]) ** 2
        tie = scores == scores.max(dim=1, keepdim=True).values
        d2_masked = torch.where(tie, d2, big)
        tie &= d2_masked == d2_masked.min(dim=1, keepdim=True).values
        # remaining ties resolve to the smallest flat index, i.e. row-major order
        pick = torch.argmax(tie.to(torch.int8), dim=1)
        rows = torch.arange(hi - lo)
        best_score[lo:hi] = scores[rows, pick].numpy()
        best_jr[lo:hi] = all_r[pick].numpy()
        best_jc[lo:hi] = all_c[pick].numpy()
    return (
        best_jr.reshape(ht, wt),
        best_jc.reshape(ht, wt),
        best_score.reshape(ht, wt),
    )


def _match_level(source, target, center_rows, center_cols, radius, patch, normalization):
    """Windowed argmax for every target position; centers are per-position."""
    if normalization not in _NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {_NORMALIZATIONS}")
    src = _as_level(source, "source level")
    tgt = _as_level(target, "target level")
    if src.shape[0] != tgt.shape[0]:
        raise ValueError(f"channel mismatch: source {src.shape[0]} vs target {tgt.shape[0]}")
    _, hs, ws = src.shape
    _, ht, wt = tgt.shape
    pad = patch // 2
    src_p = _padded(src, pad)
    tgt_p = _padded(tgt, pad)
    if radius >= max(hs, ws) - 1:
        # the window reaches every source position from any center
        return _dense_match(src_p, tgt_p, patch, hs, ws, ht, wt, normalization)
    src_norms = _patch_norms(src_p, patch, hs, ws)

    cr = torch.from_numpy(np.clip(center_rows, 0, hs - 1).astype(np.int64).reshape(-1))
    cc = torch.from_numpy(np.clip(center_cols, 0, ws - 1).astype(np.int64).reshape(-1))
    kr = torch.from_numpy(np.repeat(np.arange(ht, dtype=np.int64), wt))
    kc = torch.from_numpy(np.tile(np.arange(wt, dtype=np.int64), ht))

    n_pos = ht * wt
    dim = src.shape[0] * patch * patch
    chunk = max(1, _CHUNK_BUDGET // dim)
    best_score = np.empty(n_pos)
    best_jr = np.empty(n_pos, dtype=np.int64)
    best_jc = np.empty(n_pos, dtype=np.int64)

    for lo in range(0, n_pos, chunk):
        hi = min(lo + chunk, n_pos)
        tmat = _gather_patches(tgt_p, kr[lo:hi], kc[lo:hi], patch)
        tnorm = tmat.norm(dim=1)
        if normalization == "cosine":
            tmat = tmat / torch.clamp(tnorm, min=_TINY)[:, None]
        else:
            tmat = tmat / torch.clamp(tnorm**2, min=_TINY)[:, None]
        degenerate = tnorm <= _TINY

        b_score = torch.full((hi - lo,), -np.inf, dtype=torch.float64)
        b_jr = torch.zeros(hi - lo, dtype=torch.int64)
        b_jc = torch.zeros(hi - lo, dtype=torch.int64)
        b_d2 = torch.full((hi - lo,), 2**62, dtype=torch.int64)
        for dr in range(-radius, radius + 1):
            for dc in range(-radius, radius + 1):
                jr = cr[lo:hi] + dr
                jc = cc[lo:hi] + dc
                valid = (jr >= 0) & (jr < hs) & (jc >= 0) & (jc < ws)
                jr_s = jr.clamp(0, hs - 1)
                jc_s = jc.clamp(0, ws - 1)
                smat = _gather_patches(src_p, jr_s, jc_s, patch)
                score = (tmat * smat).sum(dim=1)
                if normalization == "cosine":
                    score = score / torch.clamp(src_norms[jr_s, jc_s], min=_TINY)
                score = torch.where(degenerate, torch.zeros_like(score), score)
                score = torch.where(valid, score, torch.full_like(score, -np.inf))
                d2 = (jr - kr[lo:hi]) ** 2 + (jc - kc[lo:hi]) ** 2
                better = (score > b_score) | (
                    (score == b_score)
                    & ((d2 < b_d2) | ((d2 == b_d2) & ((jr_s < b_jr) | ((jr_s == b_jr) & (jc_s < b_jc)))))
                )
                b_score = torch.where(better, score, b_score)
                b_jr = torch.where(better, jr_s, b_jr)
                b_jc = torch.where(better, jc_s, b_jc)
                b_d2 = torch.where(better, d2, b_d2)
        best_score[lo:hi] = b_score.numpy()
        best_jr[lo:hi] = b_jr.numpy()
        best_jc[lo:hi] = b_jc.numpy()

    return (
        best_jr.reshape(ht, wt),
        best_jc.reshape(ht, wt),
        best_score.reshape(ht, wt),
    )


def _identity_grid(shape):
    kr, kc = np.mgrid[0 : shape[0], 0 : shape[1]]
    return kr.astype(np.int64), kc.astype(np.int64)


def match_coarsest(source_level, target_level, window, normalization="cosine"):
    """Windowed search at the coarsest level, window centered at each target position."""
    _, h, w = np.asarray(target_level).shape
    cr, cc = _identity_grid((h, w))
    return _match_level(
        source_level, target_level, cr, cc, window.radii[2], window.patch_sizes[2], normalization
    )


def refine_level(prev_rows, prev_cols, source_level, target_level, window, level, normalization="cosine"):
    """Refine parents' matches one level finer.

    The search center for position k is twice the parent's best match;
    centers that fall outside the source extent are clamped and flagged.
    """
    _, hs, ws = np.asarray(source_level).shape
    _, ht, wt = np.asarray(target_level).shape
    kr, kc = _identity_grid((ht, wt))
    center_rows = 2 * prev_rows[kr // 2, kc // 2]
    center_cols = 2 * prev_cols[kr // 2, kc // 2]
    clamped = (center_rows > hs - 1) | (center_cols > ws - 1)
    jr, jc, score = _match_level(
        source_level,
        target_level,
        center_rows,
        center_cols,
        window.radii[level],
        window.patch_sizes[level],
        normalization,
    )
    return jr, jc, score, clamped


def progressive_match(source_pyr, target_pyr, window, normalization="cosine"):
    """Full coarse-to-fine matching between two 3-level pyramids."""
    src = source_pyr.levels
    tgt = target_pyr.levels
    for l in range(3):
        if src[l].shape[0] != tgt[l].shape[0]:
            raise ValueError(f"level {l} channel mismatch: {src[l].shape[0]} vs {tgt[l].shape[0]}")
    jr2, jc2, s2 = match_coarsest(src[2], tgt[2], window, normalization)
    jr1, jc1, s1, cl1 = refine_level(jr2, jc2, src[1], tgt[1], window, 1, normalization)
    jr0, jc0, s0, cl0 = refine_level(jr1, jc1, src[0], tgt[0], window, 0, normalization)
    return MatchField(
        j_rows=[jr0, jr1, jr2],
        j_cols=[jc0, jc1, jc2],
        scores=[s0, s1, s2],
        clamped=[cl0, cl1, None],
    )


def identity_match(pyramid):
    """MatchField that maps every position to itself at every level."""
    j_rows, j_cols, scores = [], [], []
    for level in pyramid.levels:
        kr, kc = _identity_grid(level.shape[1:])
        j_rows.append(kr)
        j_cols.append(kc)
        scores.append(np.zeros(level.shape[1:]))
    return MatchField(j_rows=j_rows, j_cols=j_cols, scores=scores)


def single_scale_match(source_pyr, target_pyr, window, normalization="cosine"):
    """Match only at the finest level, identity correspondence above it."""
    field_ = identity_match(target_pyr)
    kr, kc = _identity_grid(target_pyr.levels[0].shape[1:])
    jr0, jc0, s0 = _match_level(
        source_pyr.levels[0],
        target_pyr.levels[0],
        kr,
        kc,
        window.radii[0],
        window.patch_sizes[0],
        normalization,
    )
    field_.j_rows[0], field_.j_cols[0], field_.scores[0] = jr0, jc0, s0
    return field_


def brute_force_match(source_pyr, target_pyr, radii=None, patch_sizes=(3, 3, 3), normalization="cosine"):
    """Exhaustive per-position argmax oracle, pure numpy.

    `radii` restricts candidates to a window around each target
    position (None searches the whole level).  Uses the same score
    definition and tie-break as the progressive matcher but shares no
    code with it.
    """
    if normalization not in _NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {_NORMALIZATIONS}")
    j_rows, j_cols, scores = [], [], []
    for level in range(3):
        src = np.asarray(source_pyr.levels[level], dtype=np.float64)
        tgt = np.asarray(target_pyr.levels[level], dtype=np.float64)
        patch = patch_sizes[level]
        pad = patch // 2
        smat = _np_patch_matrix(src, patch)  # (hs*ws, D)
        tmat = _np_patch_matrix(tgt, patch)
        snorm = np.linalg.norm(smat, axis=1)
        tnorm = np.linalg.norm(tmat, axis=1)
        if normalization == "cosine":
            sunit = smat / np.maximum(snorm, _TINY)[:, None]
            tunit = tmat / np.maximum(tnorm, _TINY)[:, None]
        else:
            sunit = smat
            tunit = tmat / np.maximum(tnorm**2, _TINY)[:, None]

        hs, ws = src.shape[1:]
        ht, wt = tgt.shape[1:]
        jr = np.zeros((ht, wt), dtype=np.int64)
        jc = np.zeros((ht, wt), dtype=np.int64)
        sc = np.zeros((ht, wt))
        for r in range(ht):
            for c in range(wt):
                k = r * wt + c
                if radii is None:
                    cand_r, cand_c = np.mgrid[0:hs, 0:ws]
                else:
                    rad = radii[level]
                    cand_r, cand_c = np.mgrid[
                        max(0, r - rad) : min(hs, r + rad + 1),
                        max(0, c - rad) : min(ws, c + rad + 1),
                    ]
                cand_r = cand_r.ravel()
                cand_c = cand_c.ravel()
                cand_idx = cand_r * ws + cand_c
                if tnorm[k] <= _TINY:
                    vals = np.zeros(len(cand_idx))
                else:
                    vals = sunit[cand_idx] @ tunit[k]
                top = vals == vals.max()
                d2 = (cand_r - r) ** 2 + (cand_c - c) ** 2
                order = np.lexsort((cand_c[top], cand_r[top], d2[top]))[0]
                pick = np.flatnonzero(top)[order]
                jr[r, c] = cand_r[pick]
                jc[r, c] = cand_c[pick]
                sc[r, c] = vals[pick]
        j_rows.append(jr)
        j_cols.append(jc)
        scores.append(sc)
    return MatchField(j_rows=j_rows, j_cols=j_cols, scores=scores)


def _np_patch_matrix(level, patch):
    pad = patch // 2
    c, h, w = level.shape
    padded = np.pad(level, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch), axis=(1, 2))
    # windows: (c, h, w, patch, patch) -> (h*w, c*patch*patch)
    return windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * patch * patch)


def swap_level_features(target, source, j_row, j_col, patch, stride=1):
    """Replace each target patch with its matched source patch, one level.

    `target` and `source` are (C, h, w) torch tensors on the same grid
    as the match maps.  Patches are placed on a stride grid; overlapping
    contributions are averaged per position and uncovered positions keep
    the target features.  Differentiable with respect to both feature
    tensors (match indices act as constants).
    """
    if target.shape != source.shape:
        raise ValueError(f"grid mismatch: target {tuple(target.shape)} vs source {tuple(source.shape)}")
    c, h, w = target.shape
    if j_row.shape != (h, w):
        raise ValueError(f"match map shape {j_row.shape} does not cover the {h}x{w} feature grid")
    pad = patch // 2
    cols = F.unfold(F.pad(source[None], (pad, pad, pad, pad), mode="replicate"), patch)
    grid_r = np.arange(0, h, stride)
    grid_c = np.arange(0, w, stride)
    sel_r = j_row[np.ix_(grid_r, grid_c)].ravel()
    sel_c = j_col[np.ix_(grid_r, grid_c)].ravel()
    flat = torch.from_numpy((sel_r * w + sel_c).astype(np.int64))
    chosen = cols[:, :, flat]
    summed = F.fold(chosen, (h, w), patch, padding=pad, stride=stride)[0]
    ones = torch.ones((1, patch * patch, flat.numel()), dtype=target.dtype)
    counts = F.fold(ones, (h, w), patch, padding=pad, stride=stride)[0]
    return torch.where(counts > 0, summed / counts.clamp(min=1.0), target)


def swap_features(target_pyr_levels, source_pyr_levels, matches, window):
    """Swap all three encoder levels per the match field."""
    swapped = []
    for level, (tgt, src) in enumerate(zip(target_pyr_levels, source_pyr_levels)):
        swapped.append(
            swap_level_features(
                tgt,
                src,
                matches.j_rows[level],
                matches.j_cols[level],
                window.patch_sizes[level],
                window.stride,
            )
        )
    return swapped
