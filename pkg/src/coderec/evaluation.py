"""Ranking metrics, the intra/cross/cold evaluation protocols, the MF and
LightGCN baselines, and inference-timing instrumentation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import behavior as bh
from .dataset import Dataset, DatasetSplit, InteractionMatrices
from .model import Hyperparams, bpr_loss

KS_INTRA = (5, 10, 20)
KS_COLD = (3, 5)
METRIC_NAMES = ("ndcg", "hit", "mrr", "recall")


def compute_ranking_metrics(ranked, relevant, k: int) -> dict:
    """Binary-gain NDCG, Hit, MRR and Recall at cutoff k.

    `ranked` must be duplicate-free; `relevant` is the set of positives.
    """
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicates")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty relevant set; caller should skip this task")
    top = list(ranked[:k])
    dcg = 0.0
    mrr = 0.0
    hits = 0
    for pos, item in enumerate(top, start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(pos + 1)
            hits += 1
            if mrr == 0.0:
                mrr = 1.0 / pos
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, min(len(relevant), k) + 1))
    return {
        "ndcg": dcg / idcg if idcg > 0 else 0.0,
        "hit": 1.0 if hits else 0.0,
        "mrr": mrr,
        "recall": hits / len(relevant),
    }


def rank_by_score(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates ordered by descending score; ties broken by ascending id."""
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


@dataclass
class RankingTask:
    user: int
    candidates: np.ndarray
    relevant: set


@dataclass
class MetricReport:
    protocol: str
    ks: tuple
    mean: dict            # metric -> {k: value}
    per_user: dict        # user -> metric -> {k: value}
    n_users: int
    n_skipped: int
    variant: str = "CD"
    timing: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol, "variant": self.variant,
            "ks": list(self.ks),
            "mean": {m: {str(k): v for k, v in kv.items()} for m, kv in self.mean.items()},
            "n_users": self.n_users, "n_skipped": self.n_skipped,
            "per_user": {str(u): {m: {str(k): v for k, v in kv.items()}
                                  for m, kv in mk.items()}
                         for u, mk in self.per_user.items()},
            "timing": self.timing,
        }


def _train_positive_files(split: DatasetSplit) -> dict:
    pos = {}
    for r in split.train:
        if r.behavior == "commit":
            pos.setdefault(r.user.index, set()).add(r.target.index)
    return pos


def _test_positive_files(split: DatasetSplit) -> dict:
    pos = {}
    for r in split.test:
        if r.behavior == "commit":
            pos.setdefault(r.user.index, set()).add(r.target.index)
    return pos


def interacted_repos(dataset: Dataset, split: DatasetSplit, user: int) -> set:
    """Repos linked to the user by any train interaction: commits map through
    the file-to-repo assignment; star/watch/fork count directly."""
    repos = set()
    for r in split.train:
        if r.user.index != user:
            continue
        if r.behavior == "commit":
            repos.add(int(dataset.file_repo[r.target.index]))
        else:
            repos.add(r.target.index)
    return repos


def build_tasks(dataset: Dataset, split: DatasetSplit, protocol: str) -> tuple:
    """Ranking tasks plus the skipped-user count for one protocol.

    intra: candidates are files of train-interacted repos minus train positives.
    cross: candidates are files of repos the user never interacted with.
    cold:  intra rule, restricted to users with <= 2 distinct train commits.
    """
    if protocol not in ("intra", "cross", "cold"):
        raise ValueError(f"unknown protocol {protocol!r}")
    train_pos = _train_positive_files(split)
    test_pos = _test_positive_files(split)
    users = sorted({r.user.index for r in split.train} | set(test_pos))
    tasks, skipped = [], 0
    for u in users:
        if protocol == "cold" and len(train_pos.get(u, ())) > 2:
            continue
        repos = interacted_repos(dataset, split, u)
        if protocol == "cross":
            repo_mask = ~np.isin(dataset.file_repo, sorted(repos))
        else:
            repo_mask = np.isin(dataset.file_repo, sorted(repos))
        candidates = np.nonzero(repo_mask)[0]
        candidates = candidates[~np.isin(candidates, sorted(train_pos.get(u, ())))]
        relevant = test_pos.get(u, set()) & set(candidates.tolist())
        if len(candidates) == 0 or not relevant:
            skipped += 1
            continue
        tasks.append(RankingTask(user=u, candidates=candidates, relevant=relevant))
    return tasks, skipped


def evaluate_tasks(score_matrix: np.ndarray, tasks, ks, protocol: str,
                   variant: str = "CD", skipped: int = 0) -> MetricReport:
    per_user = {}
    sums = {m: {k: 0.0 for k in ks} for m in METRIC_NAMES}
    for task in tasks:
        ranked = rank_by_score(score_matrix[task.user], task.candidates)
        per_user[task.user] = {m: {} for m in METRIC_NAMES}
        for k in ks:
            vals = compute_ranking_metrics(ranked, task.relevant, k)
            for m in METRIC_NAMES:
                per_user[task.user][m][k] = vals[m]
                sums[m][k] += vals[m]
    n = len(tasks)
    mean = {m: {k: (sums[m][k] / n if n else 0.0) for k in ks} for m in METRIC_NAMES}
    return MetricReport(protocol=protocol, ks=tuple(ks), mean=mean, per_user=per_user,
                        n_users=n, n_skipped=skipped, variant=variant)


def evaluate_protocol(score_matrix: np.ndarray, dataset: Dataset, split: DatasetSplit,
                      protocol: str, ks=None, variant: str = "CD") -> MetricReport:
    if ks is None:
        ks = KS_COLD if protocol == "cold" else KS_INTRA
    tasks, skipped = build_tasks(dataset, split, protocol)
    return evaluate_tasks(score_matrix, tasks, ks, protocol, variant, skipped)


def ndcg_for_validation(model, val_pairs, k: int = 10) -> float:
    """Mean NDCG@k of validation commits against all non-train files."""
    scores = model.score_all()
    train_pos = _train_positive_files(model.split)
    by_user = {}
    for u, v in val_pairs:
        by_user.setdefault(u, set()).add(v)
    total, n = 0.0, 0
    all_files = np.arange(scores.shape[1])
    for u, relevant in by_user.items():
        candidates = all_files[~np.isin(all_files, sorted(train_pos.get(u, ())))]
        relevant = relevant & set(candidates.tolist())
        if not relevant:
            continue
        ranked = rank_by_score(scores[u], candidates)
        total += compute_ranking_metrics(ranked, relevant, k)["ndcg"]
        n += 1
    return total / n if n else 0.0


# ---------------------------------------------------------------------------
# baselines


class BaselineModel:
    """MF and LightGCN over the train bipartite graph.

    Item vectors combine a free embedding, the repo-identity one-hot through a
    projection, and mean segment features through another; user vectors add a
    multi-hot of train-interacted repos. LightGCN additionally propagates the
    composed table over the normalized user-file adjacency. With zero layers
    it degenerates to MF.
    """

    def __init__(self, name: str, dataset: Dataset, split: DatasetSplit,
                 matrices: InteractionMatrices, segment_features: np.ndarray | None,
                 hyper: Hyperparams, seed: int = 0, dtype: str = "f32"):
        if name not in ("mf", "lightgcn"):
            raise ValueError(f"unknown baseline {name!r}; expected 'mf' or 'lightgcn'")
        self.name = name
        self.dataset = dataset
        self.split = split
        self.matrices = matrices
        self.hyper = hyper
        self.seed = seed
        self.layers = 0 if name == "mf" else hyper.layers
        np_dtype = ad.DTYPES[dtype]
        d = hyper.d

        self.user_emb = ad.xavier_init((dataset.n_users, d), seed * 31 + 1, dtype)
        self.item_emb = ad.xavier_init((dataset.n_files, d), seed * 31 + 2, dtype)
        self.repo_proj = ad.xavier_init((dataset.n_repos, d), seed * 31 + 3, dtype)
        self.multi_proj = ad.xavier_init((dataset.n_repos, d), seed * 31 + 4, dtype)
        for t, n in ((self.user_emb, "user_emb"), (self.item_emb, "item_emb"),
                     (self.repo_proj, "repo_proj"), (self.multi_proj, "multi_proj")):
            t.name = f"{name}.{n}"
        self.phi = dataset.file_repo

        multihot = np.zeros((dataset.n_users, dataset.n_repos), dtype=np_dtype)
        for u in range(dataset.n_users):
            for r in interacted_repos(dataset, split, u):
                multihot[u, r] = 1.0
        self._multihot = ad.Tensor(multihot)

        if segment_features is not None and segment_features.size:
            mean_feats = segment_features.mean(axis=1).astype(np_dtype)
            self._seg = ad.Tensor(mean_feats)
            self.feat_proj = ad.xavier_init((mean_feats.shape[1], d), seed * 31 + 5, dtype)
            self.feat_proj.name = f"{name}.feat_proj"
        else:
            self._seg = None
            self.feat_proj = None

        self.a_hat = bh.normalize_adjacency(matrices.Y, dtype=np_dtype) if self.layers else None
        self._user_pos = [set(matrices.Y.cols_of(u).tolist()) for u in range(dataset.n_users)]

    def params(self):
        out = [self.user_emb, self.item_emb, self.repo_proj, self.multi_proj]
        if self.feat_proj is not None:
            out.append(self.feat_proj)
        return out

    def compute_uv(self):
        items = ad.add(self.item_emb, ad.gather_rows(self.repo_proj, self.phi))
        if self._seg is not None:
            items = ad.add(items, ad.matmul(self._seg, self.feat_proj))
        users = ad.add(self.user_emb, ad.matmul(self._multihot, self.multi_proj))
        if self.layers:
            e0 = ad.concat([users, items], axis=0)
            stack = bh.propagate(e0, self.a_hat, self.layers)
            pooled = bh.pool_layers(stack)
            users = ad.gather_rows(pooled, np.arange(self.dataset.n_users))
            items = ad.gather_rows(pooled,
                                   self.dataset.n_users + np.arange(self.dataset.n_files))
        return users, items

    def score_all(self) -> np.ndarray:
        u, v = self.compute_uv()
        return u.data @ v.data.T


def train_baseline(model: BaselineModel, epochs: int | None = None) -> list:
    """BPR training shared by both baselines; mirrors the main training loop,
    including early stopping on validation NDCG@10."""
    hyper = model.hyper
    epochs = epochs if epochs is not None else hyper.epochs
    params = model.params()
    adam = ad.AdamState(params)
    rng = np.random.default_rng([model.seed, 0xBA5E])
    y = model.matrices.Y
    pairs = np.stack([y.row_idx, y.col_idx], axis=1)
    if len(pairs) == 0:
        raise ValueError("training split has no positive interactions")
    n_files = model.dataset.n_files
    val_pairs = [(r.user.index, r.target.index) for r in model.split.val
                 if r.behavior == "commit"]
    history = []
    best_ndcg, best_params, patience_left = -1.0, None, hyper.patience
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        total, n_batches = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            batch = pairs[order[start:start + hyper.batch_size]]
            users, pos = batch[:, 0], batch[:, 1]
            neg = np.empty(len(users), dtype=np.int64)
            for i, u in enumerate(users):
                positives = model._user_pos[int(u)]
                if len(positives) >= n_files:
                    neg[i] = int(rng.integers(n_files))  # degenerate user, any file
                    continue
                while True:
                    cand = int(rng.integers(n_files))
                    if cand not in positives:
                        neg[i] = cand
                        break
            ad.zero_grads(params)
            with ad.Tape() as tape:
                u_t, v_t = model.compute_uv()
                u_b = ad.gather_rows(u_t, users)
                s_pos = ad.reduce_sum(ad.mul(u_b, ad.gather_rows(v_t, pos)), axis=1)
                s_neg = ad.reduce_sum(ad.mul(u_b, ad.gather_rows(v_t, neg)), axis=1)
                loss = bpr_loss(s_pos, s_neg)
                reg = None
                for p in params:
                    term = ad.reduce_sum(ad.mul(p, p))
                    reg = term if reg is None else ad.add(reg, term)
                loss = ad.add(loss, ad.scale(ad.sqrt(reg), hyper.lambda_reg))
            ad.backward(tape, loss)
            ad.adam_step(params, [p.grad_or_zero() for p in params], adam, hyper.lr)
            total += float(loss.data)
            n_batches += 1
        entry = {"epoch": epoch, "loss": total / max(n_batches, 1)}
        if val_pairs and (epoch % hyper.eval_every == 0 or epoch == epochs - 1):
            ndcg = ndcg_for_validation(model, val_pairs, k=10)
            entry["val_ndcg10"] = ndcg
            if ndcg > best_ndcg + 1e-9:
                best_ndcg = ndcg
                best_params = [p.data.copy() for p in params]
                patience_left = hyper.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    history.append(entry)
                    break
        history.append(entry)
    if best_params is not None:
        for p, data in zip(params, best_params):
            p.data = data
    return history


def run_baseline(name: str, dataset: Dataset, split: DatasetSplit,
                 matrices: InteractionMatrices, segment_features, hyper: Hyperparams,
                 seed: int = 0, protocol: str = "intra", ks=None) -> tuple:
    """Train a named baseline and evaluate it under the given protocol."""
    model = BaselineModel(name, dataset, split, matrices, segment_features, hyper, seed=seed)
    train_baseline(model)
    report = evaluate_protocol(model.score_all(), dataset, split, protocol, ks=ks,
                               variant=name)
    return model, report


# ---------------------------------------------------------------------------
# timing


def measure_inference(scorers: dict, tasks, repeats: int = 3,
                      assert_ordering: bool = True) -> dict:
    """Per-example inference cost for each named scorer over ranking tasks.

    Each scorer is a zero-argument callable returning a dense score matrix;
    its one-time cost is amortized over every scored (user, candidate)
    example, matching the precomputed-embeddings serving model. Reports the
    mean and p95 milliseconds per example, taking the median over repeats.
    """
    if not tasks:
        raise ValueError("cannot measure inference over zero tasks")
    n_examples = int(sum(len(t.candidates) for t in tasks))
    out = {}
    for name, scorer in scorers.items():
        means, p95s = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            matrix = scorer()
            per_task = []
            for task in tasks:
                s0 = time.perf_counter()
                scores = matrix[task.user][task.candidates]
                order = np.argsort(-scores, kind="stable")
                _ = task.candidates[order[:10]]
                per_task.append((time.perf_counter() - s0) / max(len(task.candidates), 1))
            elapsed = time.perf_counter() - t0
            means.append(1000.0 * elapsed / n_examples)
            p95s.append(1000.0 * float(np.percentile(per_task, 95)))
        out[name] = {"mean_ms": float(np.median(means)), "p95_ms": float(np.median(p95s))}
    if assert_ordering and {"mf", "lightgcn", "coderec"} <= set(out):
        mf, lgn, cdr = (out[n]["mean_ms"] for n in ("mf", "lightgcn", "coderec"))
        if not (mf <= lgn <= cdr):
            raise RuntimeError(f"inference cost ordering violated: "
                               f"mf={mf:.4f} lightgcn={lgn:.4f} coderec={cdr:.4f} ms")
        if cdr > 3.0 * lgn:
            raise RuntimeError(f"full-model per-example cost {cdr:.4f} ms exceeds "
                               f"3x lightgcn ({lgn:.4f} ms)")
    return out
