"""Coarse matching with the correspondence dual-sampler, Sinkhorn dense
matching inside patch pairs, and local-to-global pose estimation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import DegenerateGeometryError, ParameterError
from .params import ParameterStore
from .procrustes import weighted_procrustes
from .tensor import Tensor
from .transform import RigidTransform

SUPERPOINT, SKELETAL, DENSE = "superpoint", "skeletal", "dense"
MASK_VALUE = -1e6


@dataclass
class CorrespondenceSet:
    src_idx: np.ndarray
    tgt_idx: np.ndarray
    scores: np.ndarray
    kinds: np.ndarray  # per-pair kind string
    src_xyz: np.ndarray | None = None
    tgt_xyz: np.ndarray | None = None
    group: np.ndarray | None = None  # originating coarse pair for dense entries

    def __post_init__(self):
        self.src_idx = np.asarray(self.src_idx, dtype=np.int64).reshape(-1)
        self.tgt_idx = np.asarray(self.tgt_idx, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.src_idx)
        if isinstance(self.kinds, str):
            self.kinds = np.full(n, self.kinds, dtype=object)
        self.kinds = np.asarray(self.kinds, dtype=object).reshape(-1)
        if not (len(self.tgt_idx) == len(self.scores) == len(self.kinds) == n):
            raise ParameterError("correspondence fields have mismatched lengths")
        for name in ("src_xyz", "tgt_xyz"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64).reshape(n, 3))
        if self.group is not None:
            self.group = np.asarray(self.group, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.src_idx)

    @classmethod
    def empty(cls, kind: str = DENSE, with_xyz: bool = True) -> CorrespondenceSet:
        z3 = np.zeros((0, 3)) if with_xyz else None
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), kind, z3, z3, np.zeros(0) if with_xyz else None)

    def subset(self, index) -> CorrespondenceSet:
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return CorrespondenceSet(
            self.src_idx[index], self.tgt_idx[index], self.scores[index], self.kinds[index],
            pick(self.src_xyz), pick(self.tgt_xyz), pick(self.group),
        )

    def with_points(self, src_points: np.ndarray, tgt_points: np.ndarray) -> CorrespondenceSet:
        out = self.subset(np.arange(len(self)))
        out.src_xyz = np.asarray(src_points, dtype=np.float64)[self.src_idx].reshape(-1, 3)
        out.tgt_xyz = np.asarray(tgt_points, dtype=np.float64)[self.tgt_idx].reshape(-1, 3)
        return out

    @staticmethod
    def concat(sets: list[CorrespondenceSet]) -> CorrespondenceSet:
        sets = [s for s in sets if s is not None]
        if not sets:
            return CorrespondenceSet.empty()
        cat = lambda name: (  # noqa: E731
            None if any(getattr(s, name) is None for s in sets) else np.concatenate([getattr(s, name) for s in sets])
        )
        return CorrespondenceSet(
            np.concatenate([s.src_idx for s in sets]), np.concatenate([s.tgt_idx for s in sets]),
            np.concatenate([s.scores for s in sets]), np.concatenate([s.kinds for s in sets]),
            cat("src_xyz"), cat("tgt_xyz"), cat("group"),
        )


def _to_numpy(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _normalize_rows(f: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.maximum(n, 1e-12)


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def matching_matrix(F_src, F_tgt, dual_norm: str = "softmax") -> np.ndarray:
    """Dual-normalized Gaussian correlation S' of two feature sets."""
    a = _normalize_rows(_to_numpy(F_src))
    b = _normalize_rows(_to_numpy(F_tgt))
    d2 = np.maximum((a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T, 0.0)
    S = np.exp(-d2)
    if dual_norm == "softmax":
        return _softmax(S, 1) * _softmax(S, 0)
    if dual_norm == "sum":
        return (S / S.sum(1, keepdims=True)) * (S / S.sum(0, keepdims=True))
    raise ParameterError(f"unknown dual_norm {dual_norm!r}")


def coarse_match(F_src, F_tgt, cap: int, kind: str = SUPERPOINT, dual_norm: str = "softmax") -> CorrespondenceSet:
    """Top-``cap`` entries of the dual-normalized correlation; ties resolve to
    the lower row-major index."""
    Sp = matching_matrix(F_src, F_tgt, dual_norm)
    flat = Sp.reshape(-1)
    order = np.argsort(-flat, kind="stable")[: min(cap, flat.size)]
    rows, cols = np.divmod(order, Sp.shape[1])
    return CorrespondenceSet(rows, cols, flat[order], kind)


# ------------------------------------------------------------------ denoising


def _pair_points(corr: CorrespondenceSet, src_pts, tgt_pts) -> tuple[np.ndarray, np.ndarray]:
    if src_pts is None:
        return corr.src_xyz, corr.tgt_xyz
    sp = getattr(src_pts, "points", src_pts)
    tp = getattr(tgt_pts, "points", tgt_pts)
    return np.asarray(sp)[corr.src_idx], np.asarray(tp)[corr.tgt_idx]


def build_compatibility(corr: CorrespondenceSet, src_pts=None, tgt_pts=None, sigma_c: float = 0.6) -> np.ndarray:
    """M_ab = max(0, 1 - (delta_ab / sigma_c)^2) with delta the length
    discrepancy of the pair a-b across the two clouds; zero diagonal."""
    p, q = _pair_points(corr, src_pts, tgt_pts)
    dp = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    dq = np.sqrt(((q[:, None, :] - q[None, :, :]) ** 2).sum(-1))
    M = np.maximum(0.0, 1.0 - (np.abs(dp - dq) / sigma_c) ** 2)
    np.fill_diagonal(M, 0.0)
    return M


def principal_eigenvector(M: np.ndarray, max_iters: int = 100, tol: float = 1e-9) -> np.ndarray:
    n = len(M)
    if n == 0:
        return np.zeros(0)
    v = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(max_iters):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return np.zeros(n)
        w /= norm
        if np.linalg.norm(w - v) <= tol * np.linalg.norm(w):
            return w
        v = w
    return v


def spectral_denoise(corr: CorrespondenceSet, M: np.ndarray, min_cluster: int = 3, tau_conflict: float = 0.5,
                     rule: str = "compatibility") -> CorrespondenceSet:
    """Greedy main-cluster extraction driven by the principal eigenvector.

    The highest-ranked unconfirmed item is confirmed and its conflicters
    removed; the eigenvector is then recomputed on what remains.
    """
    n = len(corr)
    if n < 2:
        return corr
    if M.shape != (n, n):
        raise ParameterError(f"compatibility matrix {M.shape} does not match {n} correspondences")
    if rule not in ("compatibility", "one_to_one"):
        raise ParameterError(f"unknown denoise rule {rule!r}")
    alive = np.arange(n)
    confirmed = np.zeros(n, dtype=bool)
    while len(alive) > min_cluster:
        v = principal_eigenvector(M[np.ix_(alive, alive)])
        if np.max(np.abs(v)) < 1e-9:
            break
        open_ = np.flatnonzero(~confirmed[alive])
        if len(open_) == 0:
            break
        a_local = open_[np.argmax(v[open_])]
        a = alive[a_local]
        confirmed[a] = True
        if rule == "compatibility":
            conflict = M[a, alive] < tau_conflict
        else:
            conflict = (corr.src_idx[alive] == corr.src_idx[a]) | (corr.tgt_idx[alive] == corr.tgt_idx[a])
        conflict[a_local] = False
        drop = np.flatnonzero(conflict)
        budget = len(alive) - min_cluster
        if len(drop) > budget:
            # land exactly on the floor: drop the weakest conflicters only
            drop = drop[np.lexsort((drop, v[drop]))][:budget]
        alive = np.delete(alive, drop)
    return corr.subset(alive)


def hybrid_resample(C: CorrespondenceSet, C_s: CorrespondenceSet, n_replace: int, n_k: int) -> CorrespondenceSet:
    """Swap the ``n_replace`` weakest entries of ``C`` for the ``n_k`` best of
    ``C_s``. Entries should carry coordinates."""
    if n_k > n_replace:
        raise ParameterError("n_k must not exceed n_replace")
    drop = np.lexsort((np.arange(len(C)), C.scores))[: min(n_replace, len(C))]
    keep = np.setdiff1d(np.arange(len(C)), drop)
    add = np.lexsort((np.arange(len(C_s)), -C_s.scores))[: min(n_k, len(C_s))]
    return CorrespondenceSet.concat([C.subset(keep), C_s.subset(add)])


# ------------------------------------------------------------------ dense


def slack_parameter(params: ParameterStore | None) -> Tensor:
    if params is None:
        return Tensor(np.array(1.0))
    return params.get_or_create("matching/slack", (), 1.0)


def log_optimal_transport(scores: Tensor, row_mask: np.ndarray, col_mask: np.ndarray, slack: Tensor, iters: int) -> Tensor:
    """Batched log-domain Sinkhorn on slack-augmented score matrices.

    ``scores`` (B, n, m); masks flag valid rows/columns. Returns the
    (B, n+1, m+1) log assignment whose valid rows sum to about one.
    """
    B, n, m = scores.shape
    row_mask = np.asarray(row_mask, dtype=bool)
    col_mask = np.asarray(col_mask, dtype=bool)
    full_row = np.concatenate([row_mask, np.ones((B, 1), dtype=bool)], axis=1)
    full_col = np.concatenate([col_mask, np.ones((B, 1), dtype=bool)], axis=1)
    valid = full_row[:, :, None] & full_col[:, None, :]

    s_col = T.mul(Tensor(np.ones((B, n, 1))), slack)
    s_row = T.mul(Tensor(np.ones((B, 1, m + 1))), slack)
    Z = T.concat([T.concat([scores, s_col], axis=2), s_row], axis=1)
    Z = T.add(T.mul(Z, Tensor(valid.astype(np.float64))), Tensor(np.where(valid, 0.0, MASK_VALUE)))

    n_rows = row_mask.sum(1).astype(np.float64)
    n_cols = col_mask.sum(1).astype(np.float64)
    norm = -np.log(n_rows + n_cols)
    log_mu = np.where(full_row, norm[:, None], MASK_VALUE)
    log_mu[:, -1] = np.log(np.maximum(n_cols, 1.0)) + norm
    log_nu = np.where(full_col, norm[:, None], MASK_VALUE)
    log_nu[:, -1] = np.log(np.maximum(n_rows, 1.0)) + norm

    u = Tensor(np.zeros((B, n + 1, 1)))
    v = Tensor(np.zeros((B, 1, m + 1)))
    for _ in range(iters):
        u = T.sub(Tensor(log_mu[:, :, None]), T.logsumexp(T.add(Z, v), axis=2, keepdims=True))
        v = T.sub(Tensor(log_nu[:, None, :]), T.logsumexp(T.add(Z, u), axis=1, keepdims=True))
    return T.sub(T.add(T.add(Z, u), v), Tensor(norm[:, None, None]))


@dataclass
class PatchBatch:
    src_index: np.ndarray  # (B, n_patch) dense indices, -1 padded
    tgt_index: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    log_assignment: Tensor  # (B, n_patch+1, n_patch+1)


def patch_assignments(pyr_P, pyr_Q, src_sp: np.ndarray, tgt_sp: np.ndarray, params: ParameterStore | None,
                      cfg: ModelConfig) -> PatchBatch:
    """Sinkhorn assignments for the patch pairs (src_sp[b], tgt_sp[b])."""
    iP = pyr_P.patches.index[src_sp]
    iQ = pyr_Q.patches.index[tgt_sp]
    mP, mQ = iP >= 0, iQ >= 0
    B, k = iP.shape
    fP = T.reshape(T.gather_rows(pyr_P.dense_features, np.where(mP, iP, 0).reshape(-1)), (B, k, -1))
    fQ = T.reshape(T.gather_rows(pyr_Q.dense_features, np.where(mQ, iQ, 0).reshape(-1)), (B, iQ.shape[1], -1))
    d = fP.shape[-1]
    scores = T.scale(T.einsum("bic,bjc->bij", fP, fQ), 1.0 / np.sqrt(d))
    log_a = log_optimal_transport(scores, mP, mQ, slack_parameter(params), cfg.sinkhorn_iters)
    return PatchBatch(iP, iQ, mP, mQ, log_a)


def extract_dense(batch: PatchBatch, topk: int, tau_m: float) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per patch pair: mutual top-k real entries with probability above tau_m.
    Returns (local_row, local_col, score) triples in row-major order."""
    P = np.exp(batch.log_assignment.data[:, :-1, :-1])
    valid = batch.src_mask[:, :, None] & batch.tgt_mask[:, None, :]
    P = np.where(valid, P, 0.0)
    out = []
    for b in range(len(P)):
        Pb = P[b]
        n, m = Pb.shape
        kr, kc = min(topk, m), min(topk, n)
        row_top = np.zeros_like(Pb, dtype=bool)
        col_top = np.zeros_like(Pb, dtype=bool)
        if kr and kc:
            r_idx = np.argsort(-Pb, axis=1, kind="stable")[:, :kr]
            np.put_along_axis(row_top, r_idx, True, axis=1)
            c_idx = np.argsort(-Pb, axis=0, kind="stable")[:kc, :]
            np.put_along_axis(col_top, c_idx, True, axis=0)
        sel = row_top & col_top & (Pb > tau_m) & valid[b]
        r, c = np.nonzero(sel)
        out.append((r, c, Pb[r, c]))
    return out


def dense_match(pyr_P, pyr_Q, coarse: CorrespondenceSet, cfg: ModelConfig, params: ParameterStore | None = None,
                batch: PatchBatch | None = None) -> CorrespondenceSet:
    """Dense correspondences from Sinkhorn matching inside every superpoint
    patch pair. Skeletal coarse pairs pass through as single correspondences
    located at their skeleton points."""
    kinds = coarse.kinds
    sup = np.flatnonzero(kinds != SKELETAL)
    skel = np.flatnonzero(kinds == SKELETAL)
    parts = []
    if len(sup):
        if batch is None:
            batch = patch_assignments(pyr_P, pyr_Q, coarse.src_idx[sup], coarse.tgt_idx[sup], params, cfg)
        src_all, tgt_all, sc_all, grp_all = [], [], [], []
        for b, (r, c, s) in enumerate(extract_dense(batch, cfg.dense_topk, cfg.tau_m)):
            src_all.append(batch.src_index[b, r])
            tgt_all.append(batch.tgt_index[b, c])
            sc_all.append(s)
            grp_all.append(np.full(len(r), sup[b]))
        si, ti = np.concatenate(src_all), np.concatenate(tgt_all)
        sc, gr = np.concatenate(sc_all), np.concatenate(grp_all)
        # dedup on (src, tgt): keep the highest score, earliest group on ties
        order = np.lexsort((gr, -sc, ti, si))
        si, ti, sc, gr = si[order], ti[order], sc[order], gr[order]
        first = np.r_[True, (si[1:] != si[:-1]) | (ti[1:] != ti[:-1])] if len(si) else np.zeros(0, dtype=bool)
        si, ti, sc, gr = si[first], ti[first], sc[first], gr[first]
        reorder = np.lexsort((ti, si, gr))
        si, ti, sc, gr = si[reorder], ti[reorder], sc[reorder], gr[reorder]
        parts.append(CorrespondenceSet(
            si, ti, sc, DENSE, pyr_P.dense_points[si].reshape(-1, 3), pyr_Q.dense_points[ti].reshape(-1, 3), gr,
        ))
    if len(skel):
        sk = coarse.subset(skel)
        if sk.src_xyz is None:
            raise ParameterError("skeletal coarse pairs need coordinates")
        sk.group = skel.copy()
        parts.append(sk)
    if not parts:
        return CorrespondenceSet.empty()
    return CorrespondenceSet.concat(parts)


# ------------------------------------------------------------------ LGR


@dataclass
class LGRInfo:
    candidate_counts: list[int] = field(default_factory=list)
    inlier_history: list[int] = field(default_factory=list)
    best_group: int | None = None
    fallback: bool = False


def _inliers(T_: RigidTransform, src: np.ndarray, tgt: np.ndarray, tau: float) -> np.ndarray:
    return np.sqrt(((T_.apply(src) - tgt) ** 2).sum(-1)) < tau


def _solve(src, tgt, w) -> RigidTransform | None:
    if len(src) < 3 or not w.sum() > 0:
        return None
    try:
        return weighted_procrustes(src, tgt, w)
    except DegenerateGeometryError:
        return None


def local_to_global(dense: CorrespondenceSet, coarse: CorrespondenceSet | None = None, src=None, tgt=None,
                    cfg: ModelConfig | None = None, return_info: bool = False):
    """Best per-group Procrustes candidate by global inlier count, refined on
    its inliers while the count does not drop.

    With ``cfg.lgr_candidate_radii`` every candidate is first refit on its
    inliers at each radius in turn (multiples of tau_a) before it is scored.
    """
    cfg = cfg or ModelConfig()
    p, q = dense.src_xyz, dense.tgt_xyz
    if p is None:
        raise ParameterError("local_to_global needs correspondence coordinates")
    w = np.maximum(dense.scores, 0.0)
    info = LGRInfo()
    groups = dense.group if dense.group is not None else np.zeros(len(dense), dtype=np.int64)

    best, best_count = None, -1
    for g in np.unique(groups):
        sel = groups == g
        if sel.sum() < 3:
            continue
        cand = _solve(p[sel], q[sel], w[sel])
        if cand is None:
            continue
        for r in cfg.lgr_candidate_radii:
            mask = _inliers(cand, p, q, r * cfg.tau_a)
            refit = _solve(p[mask], q[mask], w[mask])
            if refit is not None:
                cand = refit
        count = int(_inliers(cand, p, q, cfg.tau_a).sum())
        info.candidate_counts.append(count)
        if count > best_count:
            best, best_count, info.best_group = cand, count, int(g)

    if best is None:
        info.fallback = True
        best = _solve(p, q, w) if len(p) >= 3 else None
        if best is None:
            best = RigidTransform.identity()
        best_count = int(_inliers(best, p, q, cfg.tau_a).sum()) if len(p) else 0

    info.inlier_history.append(best_count)
    for _ in range(cfg.lgr_refine):
        mask = _inliers(best, p, q, cfg.tau_a)
        cand = _solve(p[mask], q[mask], w[mask])
        if cand is None:
            break
        count = int(_inliers(cand, p, q, cfg.tau_a).sum())
        if count < best_count:
            break
        best, best_count = cand, count
        info.inlier_history.append(count)
    return (best, info) if return_info else best
