from dataclasses import replace

import numpy as np
import pytest

from cardio_anomaly.autodiff import Tensor, state_digest
from cardio_anomaly.benchmark import CLASS_NAMES, labeled_cohort, make_record, normal_cohort
from cardio_anomaly.errors import ConfigError, DataError
from cardio_anomaly.io import LabelSchema
from cardio_anomaly.losses import loss_cls
from cardio_anomaly.training import (Manifest, RunConfig, ad_objective, build_set, evaluate, joint_train,
                                     load_model, prepare_records, pretrain, run_stage, tier_counts_for,
                                     train_scratch, _batch_arrays)

from conftest import TINY_MODEL, tiny_run

SCHEMA = LabelSchema(CLASS_NAMES)


@pytest.fixture(scope="module")
def normals():
    return normal_cohort(8, seed=1)


@pytest.fixture(scope="module")
def labeled():
    return labeled_cohort([6, 3, 3, 2, 2, 2], seed=2, kind_order=CLASS_NAMES[1:])


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, normals):
    out = tmp_path_factory.mktemp("pre")
    pretrain(tiny_run(), normals, out)
    return out / "final.ckpt"


def ckpt_bytes(path):
    return open(path, "rb").read()


def test_config_round_trip(tmp_path):
    cfg = tiny_run(seed=4, tiers=(5, 20))
    assert RunConfig.from_kv(cfg.to_kv()) == cfg
    cfg.save(tmp_path / "c.cfg")
    assert RunConfig.from_file(tmp_path / "c.cfg") == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_kv({"nonsense": "1"})
    with pytest.raises(ConfigError):
        RunConfig(stage="joint")
    with pytest.raises(ConfigError):
        RunConfig(stage="warmup")
    with pytest.raises(ConfigError):
        RunConfig.from_kv({"epochs": "many"})
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "missing.cfg")


def test_pretrain_is_deterministic(tmp_path, normals, pretrained):
    pretrain(tiny_run(), normals, tmp_path)
    assert ckpt_bytes(tmp_path / "final.ckpt") == ckpt_bytes(pretrained)
    rows = (tmp_path / "loss_curve.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 and "val_loss" in rows[0]


def test_pretrain_ignores_labels(tmp_path, normals, pretrained):
    # the same records stamped "normal": checkpoints must not change
    relabeled = [replace(r, labels=("normal",)) for r in normals]
    pretrain(tiny_run(), relabeled, tmp_path)
    assert ckpt_bytes(tmp_path / "final.ckpt") == ckpt_bytes(pretrained)


def test_pretrain_rejects_abnormal(labeled):
    with pytest.raises(DataError):
        pretrain(tiny_run(), labeled)


def test_seed_changes_weights(tmp_path, normals, pretrained):
    pretrain(tiny_run(seed=1), normals, tmp_path)
    assert ckpt_bytes(tmp_path / "final.ckpt") != ckpt_bytes(pretrained)


def test_checkpoint_metadata(pretrained):
    loaded = load_model(pretrained)
    assert loaded.model.cfg == TINY_MODEL
    assert loaded.norm is not None and loaded.loc_threshold is not None
    assert loaded.config.epochs == 2


def test_frozen_finetune_keeps_backbone(tmp_path, pretrained, labeled):
    base = load_model(pretrained).model
    before = state_digest({n: p.data for n, p in base.named_parameters() if not n.startswith("classifier.")})
    cfg = tiny_run(stage="finetune_frozen", init_checkpoint=str(pretrained))
    m = Manifest(tmp_path / "manifest.txt")
    res = run_stage(cfg, labeled, SCHEMA, tmp_path, m)
    after = state_digest({n: p.data for n, p in res.model.named_parameters() if not n.startswith("classifier.")})
    assert before == after
    head_before = {n: p.data for n, p in base.named_parameters() if n.startswith("classifier.")}
    assert any(not np.array_equal(head_before[n], p.data)
               for n, p in res.model.named_parameters() if n.startswith("classifier."))
    assert Manifest.lookup(tmp_path / "manifest.txt", "digest.backbone_after") == before


def test_schema_mismatch(tmp_path, pretrained, labeled):
    cfg = tiny_run(stage="finetune_frozen", init_checkpoint=str(pretrained))
    with pytest.raises(ConfigError):
        run_stage(cfg, labeled, LabelSchema(("normal", "other")), tmp_path)


def test_joint_loss_is_additive_at_step_zero(pretrained, labeled):
    loaded = load_model(pretrained)
    model = loaded.model
    cfg = tiny_run()
    prepared = prepare_records(labeled, cfg.preprocess)
    ts = build_set(prepared, loaded.norm, SCHEMA)
    b = _batch_arrays(ts, np.arange(4), cfg.mask, np.random.default_rng(0), True)
    joint, _ = ad_objective(model, b, classify=True, cls_cfg=cfg.loss)
    ad, _ = ad_objective(model, b)
    # classification loss computed on its own, from the clean signal
    g = model.encode_global(Tensor(b["g_clean"]))
    t = model.encode_trend(Tensor(b["trend"]))
    cls = loss_cls(b["labels"], model.classify(model.diagnostic_features(g, t)), cfg.loss)
    assert joint.item() == pytest.approx(ad.item() + cls.item(), rel=1e-12, abs=1e-12)


def test_joint_updates_backbone_and_head(tmp_path, pretrained, labeled):
    base = {n: p.data.copy() for n, p in load_model(pretrained).model.named_parameters()}
    res = joint_train(tiny_run(stage="joint", init_checkpoint=str(pretrained)), pretrained, labeled, SCHEMA)
    changed = {n.split(".")[0] for n, p in res.model.named_parameters() if not np.array_equal(base[n], p.data)}
    assert {"classifier", "g_enc", "l_enc"} <= changed


def test_scratch_and_evaluate(tmp_path, labeled):
    res = train_scratch(tiny_run(stage="scratch"), labeled, SCHEMA, tmp_path)
    loaded = load_model(tmp_path / "final.ckpt")
    ev = evaluate(loaded, labeled, tier_counts=tier_counts_for(labeled, SCHEMA), strata_by=("sex",))
    assert ev.class_auroc.shape == (len(CLASS_NAMES),)
    names = [n for n, _ in ev.reports()]
    assert names[0] == "detection" and len(names) == 1 + len(ev.tiers) + len(ev.strata)
    assert res.schema == SCHEMA


def test_evaluate_localization(pretrained):
    recs = [make_record(s, ("st_shift",), f"a{s}") for s in range(3)] + normal_cohort(3, seed=9)
    ev = evaluate(load_model(pretrained), recs, strata_by=())
    assert ev.dice is not None and 0 <= ev.dice <= 1 and ev.enrichment > 0
    assert ev.detection.n_pos == 3 and ev.detection.n_neg == 3
