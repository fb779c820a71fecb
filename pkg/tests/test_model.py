import math

import numpy as np
import pytest

from coderec import autodiff as ad
from coderec import dataset as dsm
from coderec import model as mdl
from coderec import semantics as sem
from coderec.synth import SynthConfig, T1, T2, generate_dataset
from helpers import check_gradients


def build_world(tmp_path, groups=2, users_per_group=5, files_per_repo=8, seed=1,
                max_features=32):
    out = str(tmp_path / "data")
    cfg = SynthConfig(n_groups=groups, users_per_group=users_per_group,
                      files_per_repo=files_per_repo, seed=seed)
    generate_dataset(out, cfg)
    ds = dsm.load_dataset(out)
    split = dsm.split_by_time(ds.records, T1, T2)
    mats = dsm.build_interaction_matrices(split, ds.n_users, ds.n_files, ds.n_repos)
    feats = tfidf_features(ds, split, max_features=max_features)
    return ds, split, mats, feats


def tfidf_features(ds, split, n_segments=8, max_features=32):
    train_files = sorted({r.target.index for r in split.train if r.behavior == "commit"})
    docs = [sem.tokenize_source(ds.code[ds.files[j]]) for j in train_files]
    tfidf = sem.TfidfModel(docs, max_features=max_features)
    feats = np.zeros((ds.n_files, n_segments, tfidf.size), dtype=np.float32)
    for j in range(ds.n_files):
        segs = sem.segment_code(sem.tokenize_source(ds.code[ds.files[j]]), n_segments)
        feats[j] = sem.encode_segments_tfidf(segs, tfidf)
    return feats


# ---------------------------------------------------------------------------
# losses


def test_bpr_equal_scores_is_ln2():
    s = ad.Tensor(np.array([1.3, -0.2]))
    loss = mdl.bpr_loss(s, s)
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-6)


def test_bpr_large_margin_closed_form():
    pos = ad.Tensor(np.array([20.0]))
    neg = ad.Tensor(np.array([0.0]))
    loss = mdl.bpr_loss(pos, neg)
    assert float(loss.data) == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-6)
    assert float(loss.data) == pytest.approx(2.061e-9, rel=1e-3)


def test_bpr_swap_increases_loss():
    rng = np.random.default_rng(0)
    pos = ad.Tensor(rng.uniform(1.0, 2.0, size=8))
    neg = ad.Tensor(rng.uniform(-2.0, -1.0, size=8))
    assert float(mdl.bpr_loss(pos, neg).data) < float(mdl.bpr_loss(neg, pos).data)


def test_contrastive_single_row_is_zero():
    x = ad.Tensor(np.array([[0.3, -0.4, 0.1]]))
    assert float(mdl.contrastive_loss(x, x, tau=0.5).data) == pytest.approx(0.0, abs=1e-7)


def test_contrastive_orthogonal_negatives_closed_form():
    # anchors == positives, rows mutually orthogonal, tau = 1:
    # per-row loss is -log(e / (e + n)) with n = batch - 1 negatives at cos 0
    n_rows = 5
    x = ad.Tensor(np.eye(n_rows) * 3.0)
    loss = float(mdl.contrastive_loss(x, x, tau=1.0).data)
    expected = -math.log(math.e / (math.e + (n_rows - 1)))
    assert loss == pytest.approx(expected, rel=1e-6)


def test_contrastive_uniform_limit_log_k():
    rng = np.random.default_rng(1)
    x = ad.Tensor(rng.normal(size=(6, 4)))
    loss = float(mdl.contrastive_loss(x, x, tau=1e9).data)
    assert loss == pytest.approx(math.log(6), abs=1e-4)


def test_aggregate_behaviors_mean():
    a = ad.Tensor(np.array([[1.0, 0.0]]))
    b = ad.Tensor(np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(mdl.aggregate_behaviors([a, b]).data, [[0.5, 0.5]])
    np.testing.assert_allclose(mdl.aggregate_behaviors([a]).data, a.data)
    with pytest.raises(ValueError):
        mdl.aggregate_behaviors([])


def test_score_is_dot_product():
    rng = np.random.default_rng(2)
    u = rng.normal(size=6)
    v = rng.normal(size=6)
    s = float(np.dot(u, v))
    assert s == pytest.approx(sum(a * b for a, b in zip(u, v)))
    orth = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    assert float(np.dot(*orth)) == 0.0
    assert float(np.dot(u, u)) > 0


def test_sample_negatives_only_one_candidate():
    y = dsm.SparseBinary(1, 3, [(0, 0), (0, 2)])
    for trial in range(5):
        neg = mdl.sample_negatives(0, y, 4, seed=trial)
        assert (neg == 1).all()


def test_sample_negatives_exhausted_user():
    y = dsm.SparseBinary(1, 2, [(0, 0), (0, 1)])
    with pytest.raises(mdl.ResampleError):
        mdl.sample_negatives(0, y, 1, seed=0)


def test_hyperparams_require_even_eta():
    with pytest.raises(ValueError):
        mdl.Hyperparams(eta=3)


def test_variant_tags():
    assert mdl.AblationFlags().variant_tag() == "CD"
    assert mdl.AblationFlags(disable_structural=True).variant_tag() == "CD-S"
    assert mdl.AblationFlags(disable_project_level=True).variant_tag() == "CD-P"
    tag = mdl.AblationFlags(disable_fusion=True, disable_contrastive=True).variant_tag()
    assert tag == "CD-F-C"


# ---------------------------------------------------------------------------
# model assembly


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    return build_world(tmp_path_factory.mktemp("world"))


def small_hyper(**kw):
    base = dict(d=8, n_att=8, epochs=4, batch_size=256, eval_every=1, lr=3e-3)
    base.update(kw)
    return mdl.Hyperparams(**base)


def test_total_loss_weighting(world):
    ds, split, mats, feats = world
    hyper = small_hyper(lambda_project=0.1, lambda_contrast=1e-6, lambda_reg=1e-3)
    model = mdl.RecModel(ds, split, mats, feats, hyper, seed=0)
    users = mats.Y.row_idx[:16]
    pos = mats.Y.col_idx[:16]
    neg = model._negatives_for(users, np.random.default_rng(0))
    total, parts = model.batch_loss(users, pos, neg, np.random.default_rng(1))
    expected = (parts["file_bpr"] + 0.1 * parts["project_bpr"]
                + 1e-6 * parts["contrastive"] + 1e-3 * parts["reg"])
    assert parts["total"] == pytest.approx(expected, rel=1e-5)
    assert float(total.data) == pytest.approx(expected, rel=1e-5)


def test_disable_contrastive_removes_term_from_tape(world):
    ds, split, mats, feats = world
    hyper = small_hyper()
    users = mats.Y.row_idx[:8]
    pos = mats.Y.col_idx[:8]
    rng = np.random.default_rng(0)

    model_full = mdl.RecModel(ds, split, mats, feats, hyper, seed=0)
    neg = model_full._negatives_for(users, np.random.default_rng(3))
    with ad.Tape() as tape_full:
        _, parts_full = model_full.batch_loss(users, pos, neg, np.random.default_rng(1))

    flags = mdl.AblationFlags(disable_contrastive=True)
    model_cdc = mdl.RecModel(ds, split, mats, feats, hyper, flags, seed=0)
    with ad.Tape() as tape_cdc:
        _, parts_cdc = model_cdc.batch_loss(users, pos, neg, np.random.default_rng(1))

    assert "contrastive" in parts_full and "contrastive" not in parts_cdc
    assert len(tape_cdc) < len(tape_full)


def test_cdp_replaces_project_vectors_and_drops_params(world):
    ds, split, mats, feats = world
    hyper = small_hyper()
    full = mdl.RecModel(ds, split, mats, feats, hyper, seed=0)
    cdp = mdl.RecModel(ds, split, mats, feats, hyper,
                       mdl.AblationFlags(disable_project_level=True), seed=0)
    assert cdp.param_count() < full.param_count()
    rep = cdp.compute_representations()
    assert rep["z_star_t"] == {} and rep["r_star_t"] == {}
    assert np.isfinite(rep["u_final"].data).all()
    # hidden layer shape is unchanged: the side input contributes exactly zero
    assert rep["u_final"].data.shape == (ds.n_users, hyper.d)
    names = {p.name for p in cdp.params()}
    assert "mlp_u.w1b" not in names and "mlp_v.w1b" not in names


def test_cds_removes_gat_params(world):
    ds, split, mats, feats = world
    hyper = small_hyper()
    full = mdl.RecModel(ds, split, mats, feats, hyper, seed=0)
    cds = mdl.RecModel(ds, split, mats, feats, hyper,
                       mdl.AblationFlags(disable_structural=True), seed=0)
    assert cds.param_count() < full.param_count()
    assert not any((p.name or "").startswith("gat.") for p in cds.params())
    assert any((p.name or "").startswith("gat.") for p in full.params())


def test_same_repo_files_share_project_operand(world):
    ds, split, mats, feats = world
    model = mdl.RecModel(ds, split, mats, feats, small_hyper(), seed=0)
    rep = model.compute_representations()
    t = model.hyper.behaviors[0]
    r_star = rep["r_star_t"][t].data
    same_repo = np.nonzero(ds.file_repo == ds.file_repo[0])[0]
    assert len(same_repo) > 1
    for j in same_repo[1:]:
        np.testing.assert_array_equal(r_star[ds.file_repo[0]], r_star[ds.file_repo[j]])


def test_file_bpr_near_ln2_at_init(world):
    ds, split, mats, feats = world
    model = mdl.RecModel(ds, split, mats, feats, small_hyper(d=32, n_att=32), seed=0)
    rng = np.random.default_rng(7)
    users = rng.integers(0, ds.n_users, size=1024)
    pos = np.array([int(rng.choice(sorted(model._user_pos[u]) or [0])) for u in users])
    neg = model._negatives_for(users, rng)
    rep = model.compute_representations()
    u_b = ad.gather_rows(rep["u_final"], users)
    s_pos = ad.reduce_sum(ad.mul(u_b, ad.gather_rows(rep["v_final"], pos)), axis=1)
    s_neg = ad.reduce_sum(ad.mul(u_b, ad.gather_rows(rep["v_final"], neg)), axis=1)
    loss = float(mdl.bpr_loss(s_pos, s_neg).data)
    assert abs(loss - math.log(2)) < 0.05


def test_ranking_invariance_under_constant_shift(world):
    ds, split, mats, feats = world
    model = mdl.RecModel(ds, split, mats, feats, small_hyper(), seed=0)
    scores = model.score_all().astype(np.float64)
    shifted = scores.copy()
    shifted[3] += 123.456
    np.testing.assert_array_equal(np.argsort(-scores[3], kind="stable"),
                                  np.argsort(-shifted[3], kind="stable"))


def test_gradient_completeness(world):
    ds, split, mats, feats = world
    model = mdl.RecModel(ds, split, mats, feats, small_hyper(), seed=0)
    params = model.params()
    users = mats.Y.row_idx
    pos = mats.Y.col_idx
    neg = model._negatives_for(users, np.random.default_rng(0))
    ad.zero_grads(params)
    with ad.Tape() as tape:
        loss, _ = model.batch_loss(users, pos, neg, np.random.default_rng(1))
    ad.backward(tape, loss)
    for p in params:
        g = p.grad_or_zero()
        assert np.abs(g).max() > 0, f"parameter {p.name} received no gradient"


def test_full_model_gradients_match_finite_differences(tmp_path):
    # compact instance, f64; the acceptance suite runs the full-size one
    ds, split, mats, feats = build_world(tmp_path, groups=1, users_per_group=5,
                                         files_per_repo=4, seed=3, max_features=10)
    hyper = mdl.Hyperparams(d=4, n_att=4, layers=2, eta=2, n_segments=8,
                            n_hist_users=2, gat_layers=2,
                            lambda_project=0.1, lambda_contrast=1e-2, lambda_reg=1e-3)
    model = mdl.RecModel(ds, split, mats, feats, hyper, seed=5, dtype="f64")
    params = model.params()
    users = mats.Y.row_idx[:6]
    pos = mats.Y.col_idx[:6]
    neg = model._negatives_for(users, np.random.default_rng(2))

    def loss():
        total, _ = model.batch_loss(users, pos, neg, np.random.default_rng(11))
        return total

    worst = check_gradients(loss, params, step=1e-4, tol=1e-3)
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# training loop


def test_training_loss_decreases(tmp_path):
    # 50-user planted set, lr 1e-3, fixed seed: strict decrease over 5 epochs
    ds, split, mats, feats = build_world(tmp_path, groups=5, users_per_group=10,
                                         files_per_repo=20, seed=4, max_features=64)
    hyper = mdl.Hyperparams(d=16, n_att=16, epochs=6, lr=1e-3,
                            eval_every=100, patience=100)
    model, history = mdl.train_model(ds, split, mats, feats, hyper, seed=0)
    losses = [h["file_bpr"] for h in history if "file_bpr" in h]
    assert len(losses) == 6
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_seed_deterministic(tmp_path):
    ds, split, mats, feats = build_world(tmp_path, groups=1, users_per_group=4,
                                         files_per_repo=6, seed=5)
    hyper = small_hyper(epochs=3)
    m1, h1 = mdl.train_model(ds, split, mats, feats, hyper, seed=9)
    m2, h2 = mdl.train_model(ds, split, mats, feats, hyper, seed=9)
    assert h1 == h2
    for p1, p2 in zip(m1.params(), m2.params()):
        np.testing.assert_array_equal(p1.data, p2.data)
    m3, h3 = mdl.train_model(ds, split, mats, feats, hyper, seed=10)
    assert h3 != h1


def test_checkpoint_round_trip(tmp_path):
    ds, split, mats, feats = build_world(tmp_path, groups=1, users_per_group=4,
                                         files_per_repo=6, seed=6)
    hyper = small_hyper(epochs=2)
    model, _ = mdl.train_model(ds, split, mats, feats, hyper, seed=1)
    path = str(tmp_path / "model.ckpt")
    mdl.save_checkpoint(path, model)
    loaded = mdl.load_checkpoint(path, ds, split, mats, feats)
    np.testing.assert_allclose(loaded.score_all(), model.score_all(), atol=1e-6)
    assert loaded.flags.variant_tag() == "CD"


def test_checkpoint_refuses_mismatched_dataset(tmp_path):
    ds, split, mats, feats = build_world(tmp_path / "a", groups=1, users_per_group=4,
                                         files_per_repo=6, seed=6)
    ds2, split2, mats2, feats2 = build_world(tmp_path / "b", groups=1, users_per_group=5,
                                             files_per_repo=6, seed=7)
    model = mdl.RecModel(ds, split, mats, feats, small_hyper(), seed=0)
    path = str(tmp_path / "model.ckpt")
    mdl.save_checkpoint(path, model)
    with pytest.raises(dsm.DataIntegrityError, match="hash"):
        mdl.load_checkpoint(path, ds2, split2, mats2, feats2)


def test_checkpoint_bytes_deterministic(tmp_path):
    ds, split, mats, feats = build_world(tmp_path, groups=1, users_per_group=4,
                                         files_per_repo=6, seed=8)
    hyper = small_hyper(epochs=2)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    m1, _ = mdl.train_model(ds, split, mats, feats, hyper, seed=2)
    mdl.save_checkpoint(p1, m1)
    m2, _ = mdl.train_model(ds, split, mats, feats, hyper, seed=2)
    mdl.save_checkpoint(p2, m2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_zero_lambdas_leave_pure_file_loss(world):
    ds, split, mats, feats = world
    hyper = small_hyper(lambda_project=0.0, lambda_contrast=0.0, lambda_reg=0.0)
    model = mdl.RecModel(ds, split, mats, feats, hyper, seed=0)
    users = mats.Y.row_idx[:12]
    pos = mats.Y.col_idx[:12]
    neg = model._negatives_for(users, np.random.default_rng(4))
    total, parts = model.batch_loss(users, pos, neg, np.random.default_rng(5))
    assert float(total.data) == parts["file_bpr"]


def test_training_skips_saturated_user():
    # user 0 committed every file; user 1 leaves room for negatives
    records = []
    for v in range(3):
        records.append(dsm.InteractionRecord(dsm.EntityId("user", 0),
                                             dsm.EntityId("file", v), "commit", 10))
    records.append(dsm.InteractionRecord(dsm.EntityId("user", 1),
                                         dsm.EntityId("file", 0), "commit", 10))
    split = dsm.DatasetSplit(train=records, val=[], test=[], boundaries=(100, 200))
    mats = dsm.build_interaction_matrices(split, 2, 3, 1)

    class TinyDs:
        n_users, n_files, n_repos, n_dirs = 2, 3, 1, 0
        files = ["f0", "f1", "f2"]
        file_repo = np.zeros(3, dtype=np.int64)
        file_parent = [("root", 0)] * 3
        dirs, dir_names, dir_repo, dir_parent = [], [], np.zeros(0, dtype=np.int64), []
        repo_owners, repo_created = ["o"], [1]
        repo_languages, repo_topics = [["Py"]], [["x"]]
        users = ["u0", "u1"]
        user_logins = ["u0", "u1"]
        repos = ["r0"]

        def mapping_hash(self):
            return "tiny"

    feats = np.random.default_rng(0).normal(size=(3, 8, 6)).astype(np.float32)
    hyper = mdl.Hyperparams(d=4, n_att=4, epochs=2, behaviors=())
    flags = mdl.AblationFlags(disable_project_level=True)
    model, history = mdl.train_model(TinyDs(), split, mats, feats, hyper, flags, seed=0)
    skipped = [h for h in history if "skipped_users" in h]
    assert skipped and skipped[0]["skipped_users"] == [0]
    assert np.isfinite(model.score_all()).all()
