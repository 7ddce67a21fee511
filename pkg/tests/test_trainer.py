import math

import pandas as pd
import pytest
import torch

from config import ConfigError, config_from_mapping, config_hash, load_config
from detector import CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint, strip_nra
from ovd_head import read_detections
from region_geometry import BBox
from trainer import (GRID_COLUMNS, LOSS_COLUMNS, ProposalError, assign_labels, batch_for_step, build_experiment,
                     evaluate_model, read_grid, region_samples, run_ablation_grid, step_rng, train)


def fresh(tiny_overrides, **overrides):
    return build_experiment(config_from_mapping({**tiny_overrides, **overrides}))


def cls_history(state):
    return [r.cls for r in state.history]


def same_metrics(a, b):
    return all((math.isnan(a[k]) and math.isnan(b[k])) or a[k] == b[k] for k in a)


def test_identical_seeds_give_identical_losses(tiny_overrides):
    """Same seed, same loss curve."""
    a = train(fresh(tiny_overrides), steps=2, progress=False)
    b = train(fresh(tiny_overrides), steps=2, progress=False)
    assert [r.as_row() for r in a.history] == [r.as_row() for r in b.history]
    assert all(r.nraa is not None and r.num_pairs > 0 for r in a.history)


def test_without_distillation_there_is_no_alignment_term(tiny_overrides):
    """Without distillation only the classification loss is optimised."""
    state = train(fresh(tiny_overrides, distill="false", use_nra="false"), steps=2, progress=False)
    assert all(r.nraa is None and r.total == r.cls and r.num_pairs == 0 for r in state.history)


def test_zero_alignment_weight_matches_no_distillation(tiny_overrides):
    """lambda=0 trains exactly like the classification-only run."""
    weighted = fresh(tiny_overrides, lambda_nraa="0", use_nra="false")
    plain = fresh(tiny_overrides, distill="false", use_nra="false")
    a = train(weighted, steps=3, progress=False)
    b = train(plain, steps=3, progress=False)
    assert cls_history(a) == pytest.approx(cls_history(b), abs=1e-6)
    for (name, p), q in zip(weighted.model.state_dict().items(), plain.model.state_dict().values()):
        assert torch.allclose(p, q, atol=1e-6), name


def test_teacher_stays_frozen(tiny_overrides):
    """Frozen encoders never change during training."""
    exp = fresh(tiny_overrides)
    before = exp.encoders.snapshot()
    train(exp, steps=2, progress=False)
    after = exp.encoders.snapshot()
    assert before.keys() == after.keys()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_student_parameters_move(tiny_overrides):
    exp = fresh(tiny_overrides)
    before = {k: v.clone() for k, v in exp.model.state_dict().items()}
    train(exp, steps=2, progress=False)
    after = exp.model.state_dict()
    for name in ("word_head.v2l.weight", "nra.layers.0.out_proj.weight", "nra.layers.0.q_proj.weight"):
        assert not torch.equal(before[name], after[name]), name


def test_fresh_nra_residual_branches_are_zero(tiny_experiment):
    layer = tiny_experiment.model.nra.layers[0]
    assert not layer.out_proj.weight.any() and not layer.ffn[-1].weight.any()
    assert torch.equal(layer.k_proj.weight, layer.q_proj.weight)


def test_individual_loss_off_by_default(tiny_overrides):
    a = train(fresh(tiny_overrides), steps=2, progress=False)
    b = train(fresh(tiny_overrides, lambda_individual="0"), steps=2, progress=False)
    assert [r.as_row() for r in a.history] == [r.as_row() for r in b.history]
    assert all(r.individual is None for r in a.history)


def test_individual_loss_adds_to_total(tiny_overrides):
    plain = train(fresh(tiny_overrides), steps=1, progress=False)
    state = train(fresh(tiny_overrides, lambda_individual="1"), steps=2, progress=False)
    for r in state.history:
        assert r.individual is not None and r.individual >= 0
        assert r.total == pytest.approx(r.cls + r.nraa + r.individual, rel=1e-5)
    # the extra term only changes what happens after the first update
    assert state.history[0].cls == pytest.approx(plain.history[0].cls, abs=1e-6)
    half = train(fresh(tiny_overrides, lambda_individual="1/2"), steps=1, progress=False).history[0]
    assert half.total == pytest.approx(half.cls + half.nraa + 0.5 * half.individual, rel=1e-5)


def test_individual_loss_requires_distillation(tiny_overrides):
    with pytest.raises(ConfigError, match="lambda_individual"):
        config_from_mapping({**tiny_overrides, "lambda_individual": "1", "distill": "false", "use_nra": "false"})
    with pytest.raises(ConfigError):
        config_from_mapping({**tiny_overrides, "lambda_individual": "-1"})


@pytest.mark.parametrize("clip", [0.5, 0.05])
def test_gradients_are_clipped(tiny_overrides, clip):
    exp = fresh(tiny_overrides, grad_clip=str(clip))
    train(exp, steps=1, progress=False)
    grads = [p.grad for p in exp.model.parameters() if p.grad is not None]
    assert grads
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads]))
    assert float(norm) <= clip * (1 + 1e-4)


def test_unclipped_gradients_are_left_alone(tiny_overrides):
    """grad_clip=0 disables clipping; the raw norm at logit scale 50 is well above 1e-3."""
    exp = fresh(tiny_overrides, grad_clip="0")
    train(exp, steps=1, progress=False)
    grads = [p.grad for p in exp.model.parameters() if p.grad is not None]
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads]))
    assert float(norm) > 1e-3


def test_region_samples_without_neighbors(tiny_cfg, tiny_overrides, tiny_experiment):
    cfg = config_from_mapping({**tiny_overrides, "use_neighbors": "false"})
    scene = tiny_experiment.train_set.scenes[0]
    boxes = [BBox(10, 10, 20, 20), BBox(30, 30, 40, 44)]
    samples = region_samples(scene, boxes, cfg, step_rng(0, 3, 0))
    assert [i for i, _ in samples] == [0, 1]
    assert all(s.num_neighbors == 0 for _, s in samples)
    with_neighbors = region_samples(scene, boxes, tiny_cfg, step_rng(0, 3, 0))
    assert all(s.num_neighbors > 0 for _, s in with_neighbors)


def test_region_samples_name_the_failing_proposal(tiny_cfg, tiny_experiment):
    scene = tiny_experiment.train_set.scenes[0]
    boxes = [BBox(10, 10, 20, 20), BBox(60, 60, 70, 70)]
    with pytest.raises(ProposalError) as info:
        region_samples(scene, boxes, tiny_cfg, step_rng(0, 3, 0))
    assert info.value.proposal_index == 1
    assert info.value.image_id == scene.image_id


def test_assign_labels():
    objects = [(BBox(0, 0, 10, 10), "cat"), (BBox(20, 20, 30, 30), "cow")]
    labels = assign_labels([BBox(0, 0, 10, 11), BBox(20, 20, 30, 30), BBox(40, 40, 50, 50)], objects,
                           ("dog", "cat"))
    assert labels.tolist() == [1, 2, 2]
    assert assign_labels([], objects, ("cat",)).tolist() == []


def test_batches_are_reproducible_and_distinct(tiny_cfg, tiny_experiment):
    first = batch_for_step(tiny_experiment.train_set, tiny_cfg, 0)
    assert [s.image_id for s in first] == [s.image_id for s in batch_for_step(tiny_experiment.train_set, tiny_cfg, 0)]
    assert len({s.image_id for s in first}) == tiny_cfg.batch_size


def test_placement_validation(tiny_overrides):
    with pytest.raises(ConfigError):
        config_from_mapping({**tiny_overrides, "distill": "false"})
    with pytest.raises(ConfigError):
        config_from_mapping({**tiny_overrides, "use_nra": "false", "nra_in_test_cls": "true"})
    with pytest.raises(ConfigError):
        config_from_mapping({**tiny_overrides, "nra_in_train_align": "false"})
    for flag in ("nra_in_train_cls", "nra_in_train_align"):
        with pytest.raises(ConfigError, match=flag):
            config_from_mapping({**tiny_overrides, "use_nra": "false", flag: "true"})
    off = config_from_mapping({"use_nra": "false"}, base=config_from_mapping(tiny_overrides))
    assert off.ablation.placement == "-"
    assert not off.ablation.nra_in_train_cls and not off.ablation.nra_in_train_align
    assert config_from_mapping(tiny_overrides).ablation.placement == "b+e"
    both = config_from_mapping({**tiny_overrides, "nra_in_train_cls": "true", "nra_in_test_cls": "true"})
    assert both.ablation.placement == "a+d" and not both.ablation.degenerate
    flagged = config_from_mapping({**tiny_overrides, "nra_in_test_cls": "true"})
    assert flagged.ablation.placement == "a+e" and flagged.ablation.degenerate


def test_train_writes_artifacts_and_resumes_exactly(tiny_overrides, tmp_path):
    """Resuming from step 2 reproduces the straight 4-step run."""
    straight = train(fresh(tiny_overrides), tmp_path / "straight", steps=4, progress=False)
    assert {p.name for p in (tmp_path / "straight").iterdir()} == {
        "config.env", "checkpoint_000002.pt", "checkpoint.pt", "losses.csv"}
    losses = pd.read_csv(tmp_path / "straight" / "losses.csv")
    assert list(losses.columns) == LOSS_COLUMNS
    assert losses["step"].tolist() == [1, 2, 3, 4]

    exp = fresh(tiny_overrides)
    cfg = load_config(tmp_path / "straight" / "config.env")
    assert config_hash(cfg) == config_hash(exp.cfg)

    train(exp, tmp_path / "first", steps=2, progress=False)
    resumed = train(fresh(tiny_overrides), tmp_path / "second", steps=4,
                    resume=tmp_path / "first" / "checkpoint.pt", progress=False)
    assert resumed.step == 4
    assert cls_history(resumed) == pytest.approx(cls_history(straight), abs=1e-6)
    assert [r.nraa for r in resumed.history] == pytest.approx([r.nraa for r in straight.history], abs=1e-6)


def test_checkpoint_errors(tiny_experiment, tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    (tmp_path / "junk.pt").write_text("not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    path = save_checkpoint(tmp_path / "ok.pt", tiny_experiment.model, tiny_experiment.cfg, 0)
    payload = load_checkpoint(path)
    payload["config_hash"] = "0" * 16
    with pytest.raises(CheckpointError):
        model_from_checkpoint(payload)


def test_stripping_nra_leaves_evaluation_bit_identical(tiny_overrides, tmp_path):
    """NRA weights are unused at inference."""
    exp = fresh(tiny_overrides)
    train(exp, tmp_path / "run", steps=1, progress=False)
    payload = load_checkpoint(tmp_path / "run" / "checkpoint.pt")
    full, cfg = model_from_checkpoint(payload)
    stripped, _ = model_from_checkpoint(strip_nra(payload))
    assert full.has_nra and not stripped.has_nra
    a = evaluate_model(full, exp.encoders, exp.vocab, exp.test_set, cfg, tmp_path / "full.txt")
    b = evaluate_model(stripped, exp.encoders, exp.vocab, exp.test_set, cfg, tmp_path / "stripped.txt")
    assert same_metrics(a, b)
    assert (tmp_path / "full.txt").read_text() == (tmp_path / "stripped.txt").read_text()
    assert all(d.class_name in exp.vocab.all_classes for d in read_detections(tmp_path / "full.txt"))


def test_evaluation_metrics_are_in_range(tiny_experiment):
    exp = tiny_experiment
    metrics = evaluate_model(exp.model, exp.encoders, exp.vocab, exp.test_set, exp.cfg)
    assert set(metrics) == {"novel_acc", "base_acc", "AP50_novel_toy", "AP50_base_toy"}
    assert all(math.isnan(v) or 0.0 <= v <= 1.0 for v in metrics.values())
    again = evaluate_model(exp.model, exp.encoders, exp.vocab, exp.test_set, exp.cfg)
    assert same_metrics(metrics, again)


def test_read_grid(tmp_path):
    path = tmp_path / "grid.csv"
    path.write_text("name,use_nra,topk\nfull,,\nsmall,false,2\n")
    assert read_grid(path) == [("full", {}), ("small", {"use_nra": "false", "topk": "2"})]
    (tmp_path / "empty.csv").write_text("")
    assert read_grid(tmp_path / "empty.csv") == []
    (tmp_path / "nameless.csv").write_text("topk\n2\n")
    with pytest.raises(ConfigError):
        read_grid(tmp_path / "nameless.csv")
    with pytest.raises(FileNotFoundError):
        read_grid(tmp_path / "missing.csv")


def test_grid_keeps_order_and_records_failures(tiny_cfg):
    """Failing rows do not stop the grid."""
    rows = [("bad-tau", {"tau_train": "0"}),
            ("no-distill", {"distill": "false", "use_nra": "false"}),
            ("bad-placement", {"distill": "false"})]
    table = run_ablation_grid(rows, 1, tiny_cfg, progress=False)
    assert list(table.columns) == GRID_COLUMNS
    assert table["name"].tolist() == ["bad-tau", "no-distill", "bad-placement"]
    assert table["status"].tolist() == ["error", "ok", "error"]
    assert "tau_train" in table.loc[0, "error"]
    assert table.loc[1, "placement"] == "-"


def test_grid_with_no_rows_is_empty(tiny_cfg):
    table = run_ablation_grid([], 1, tiny_cfg, progress=False)
    assert table.empty and list(table.columns) == GRID_COLUMNS
