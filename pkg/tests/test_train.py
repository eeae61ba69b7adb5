from dataclasses import replace

import torch
from pytest import approx, raises


def test_total_loss():
    from ckdtrack.distill import DistillConfig
    from ckdtrack.train import total_loss

    one, half = torch.tensor(1.0), torch.tensor(0.5)
    config = DistillConfig(lambda_cd=1.0, lambda_sd=2.0, lambda_fd=3.0)
    assert float(total_loss(one, half, half, config)) == approx(2.5)
    assert float(total_loss(one, half, half, config, fd=half)) == approx(4.0)
    off = DistillConfig(lambda_cd=0.0, lambda_sd=0.0)
    assert float(total_loss(one, half, half, off)) == approx(1.0)


def test_default_weights():
    from ckdtrack.distill import DistillConfig

    config = DistillConfig()
    assert config.lambda_sd / config.lambda_cd == approx(2.0)


def test_non_finite_loss_names_the_term():
    from ckdtrack.distill import DistillConfig
    from ckdtrack.errors import NonFiniteLoss, NumericError
    from ckdtrack.train import total_loss

    one = torch.tensor(1.0)
    with raises(NonFiniteLoss, match="cd loss") as error:
        total_loss(one, torch.tensor(float("nan")), one, DistillConfig(), step=7)
    assert error.value.term == "cd"
    assert error.value.step == 7
    assert isinstance(error.value, NumericError)

    with raises(NonFiniteLoss, match="sd loss"):
        total_loss(one, one, torch.tensor(float("inf")), DistillConfig())


def test_sample_masks():
    from ckdtrack.backbone import STUDENTS
    from ckdtrack.train import sample_masks

    masks = sample_masks(3, 16, 0.25, torch.Generator().manual_seed(0))
    assert set(masks) == set(STUDENTS)
    for mask in masks.values():
        assert mask.shape == (3, 16)
        assert mask.sum(-1).tolist() == [4, 4, 4]
    assert not torch.equal(masks["student_rgb"], masks["student_tir"])


def test_masks_do_not_reach_the_teachers(double_model, batch):
    from ckdtrack.backbone import TEACHERS, forward_ckd
    from ckdtrack.train import sample_masks

    masks = sample_masks(3, 16, 0.5, torch.Generator().manual_seed(1))
    masked = forward_ckd(batch, double_model, "train", masks)
    plain = forward_ckd(batch, double_model, "train")
    for name in TEACHERS:
        assert torch.equal(masked[name].final.tokens, plain[name].final.tokens)
    assert not torch.equal(
        masked["student_rgb"].final.tokens, plain["student_rgb"].final.tokens
    )


def branch_parameters(model, name):
    return list(model.branches[name].parameters())


def test_content_loss_does_not_reach_the_teachers(double_model, batch):
    from ckdtrack.backbone import forward_ckd
    from ckdtrack.distill import content_distill_loss

    outputs = forward_ckd(batch, double_model, "train")
    loss = content_distill_loss(
        outputs["teacher_rgb"].features, outputs["student_rgb"].features
    )
    teacher = torch.autograd.grad(
        loss,
        branch_parameters(double_model, "teacher_rgb"),
        retain_graph=True,
        allow_unused=True,
    )
    assert all(g is None for g in teacher)
    student = torch.autograd.grad(
        loss, branch_parameters(double_model, "student_rgb"), allow_unused=True
    )
    assert any(g is not None and g.abs().sum() > 0 for g in student)


def test_style_loss_moves_both_students_only(double_model, batch):
    from ckdtrack.backbone import BRANCHES, forward_ckd
    from ckdtrack.distill import style_distill_loss

    outputs = forward_ckd(batch, double_model, "train")
    loss = style_distill_loss(
        outputs["student_rgb"].features, outputs["student_tir"].features
    )
    params = {name: branch_parameters(double_model, name) for name in BRANCHES}
    grads = torch.autograd.grad(loss, sum(params.values(), []), allow_unused=True)
    by_branch = {}
    start = 0
    for name, group in params.items():
        by_branch[name] = grads[start : start + len(group)]
        start += len(group)

    for name in ("teacher_rgb", "teacher_tir"):
        assert all(g is None for g in by_branch[name])
    for name in ("student_rgb", "student_tir"):
        assert any(g is not None and g.abs().sum() > 0 for g in by_branch[name])


def test_gradients_through_the_model(double_model, batch):
    from ckdtrack.backbone import forward_ckd
    from ckdtrack.distill import content_distill_loss, style_distill_loss
    from ckdtrack.head import task_loss, track_heads
    from ckdtrack.train import grad_check

    config = double_model.config
    students = branch_parameters(double_model, "student_rgb") + branch_parameters(
        double_model, "student_tir"
    )
    fused_head = list(double_model.heads["fused"].parameters())

    def style():
        outputs = forward_ckd(batch, double_model, "train")
        return style_distill_loss(
            outputs["student_rgb"].features, outputs["student_tir"].features
        )

    def content():
        outputs = forward_ckd(batch, double_model, "train")
        return content_distill_loss(
            outputs["teacher_tir"].features, outputs["student_tir"].features
        )

    def task():
        outputs = forward_ckd(batch, double_model, "infer")
        heads = track_heads(double_model, outputs)
        return task_loss(heads["fused"], batch.gt, config.patch, config.search_size)

    generator = torch.Generator().manual_seed(0)
    for closure, params in ((style, students), (content, students)):
        assert grad_check(closure, params, n_coords=40, generator=generator) <= 1e-4
    error = grad_check(task, students + fused_head, n_coords=40, generator=generator)
    assert error <= 1e-4


def test_optimizer_groups(tiny_model):
    from ckdtrack.train import TrainConfig, make_optimizer

    config = TrainConfig(lr_backbone=1e-4, lr_head=1e-3)
    optimizer = make_optimizer(tiny_model, config)
    assert [group["lr"] for group in optimizer.param_groups] == [1e-4, 1e-3]
    counted = sum(len(group["params"]) for group in optimizer.param_groups)
    assert counted == len(list(tiny_model.parameters()))


def test_train_step_updates_the_model(tiny_model, samples):
    from ckdtrack.distill import DistillConfig
    from ckdtrack.sequences import collate
    from ckdtrack.train import TrainConfig, make_optimizer, train_step
    from ckdtrack.variants import get_variant

    before = {k: v.clone() for k, v in tiny_model.state_dict().items()}
    config = TrainConfig()
    breakdown = train_step(
        tiny_model,
        collate(samples[:2]),
        make_optimizer(tiny_model, config),
        get_variant("ckd"),
        config,
        DistillConfig(),
        torch.Generator().manual_seed(0),
        step=4,
    )
    assert breakdown.step == 4
    assert breakdown.total == approx(
        breakdown.task + breakdown.cd + 2 * breakdown.sd, rel=1e-5
    )
    assert breakdown.fd == 0
    after = tiny_model.state_dict()
    name = "branches.student_rgb.embed.weight"
    assert not torch.equal(before[name], after[name])


def test_empty_batch(tiny_model, samples):
    from ckdtrack.distill import DistillConfig
    from ckdtrack.errors import ContractError
    from ckdtrack.sequences import SampleBatch, collate
    from ckdtrack.train import TrainConfig, make_optimizer, train_step
    from ckdtrack.variants import get_variant

    full = collate(samples[:1])
    empty = SampleBatch(**{k: v[:0] for k, v in vars(full).items()})
    with raises(ContractError):
        train_step(
            tiny_model,
            empty,
            make_optimizer(tiny_model, TrainConfig()),
            get_variant("baseline"),
            TrainConfig(),
            DistillConfig(),
            torch.Generator(),
        )


def test_trainer_is_deterministic(run_config):
    from ckdtrack.readers import read_sequences
    from ckdtrack.train import Trainer

    sequences = read_sequences(run_config)
    first = Trainer(run_config).fit(sequences, steps=2)
    second = Trainer(run_config).fit(sequences, steps=2)
    assert [b.to_dict() for b in first] == [b.to_dict() for b in second]
    assert [b.step for b in first] == [0, 1]


def test_baseline_has_no_distillation(run_config):
    from ckdtrack.readers import read_sequences
    from ckdtrack.train import Trainer

    config = run_config.replace(**{"train.variant": "baseline"})
    history = Trainer(config).fit(read_sequences(config))
    assert len(history) == config.train.steps
    assert all(b.cd == 0 and b.sd == 0 and b.fd == 0 for b in history)
    assert all(b.total == approx(b.task) for b in history)


def test_feature_variant_only_uses_feature_distillation(run_config):
    from ckdtrack.readers import read_sequences
    from ckdtrack.train import Trainer

    config = run_config.replace(**{"train.variant": "fd"})
    history = Trainer(config).fit(read_sequences(config), steps=1)
    assert history[0].cd == history[0].sd == 0
    assert history[0].fd > 0


def test_fit_needs_sequences(run_config):
    from ckdtrack.errors import ContractError
    from ckdtrack.train import Trainer

    with raises(ContractError):
        Trainer(run_config).fit([])


def test_checkpoint_round_trip(double_model, batch, tmp_path):
    from ckdtrack.backbone import forward_ckd
    from ckdtrack.train import load_checkpoint, save_checkpoint

    path = save_checkpoint(double_model, tmp_path / "nested" / "model.pt")
    loaded = load_checkpoint(path, config=double_model.config)
    expected = double_model.state_dict()
    actual = loaded.state_dict()
    assert expected.keys() == actual.keys()
    assert all(torch.equal(expected[k], actual[k]) for k in expected)

    first = forward_ckd(batch, double_model, "infer")
    second = forward_ckd(batch, loaded, "infer")
    for name in first:
        assert torch.equal(first[name].final.tokens, second[name].final.tokens)


def test_checkpoint_errors(tiny_model, tmp_path):
    from ckdtrack.errors import CheckpointError
    from ckdtrack.train import load_checkpoint, save_checkpoint

    path = save_checkpoint(tiny_model, tmp_path / "model.pt")
    with raises(CheckpointError, match="geometry"):
        load_checkpoint(path, config=replace(tiny_model.config, layers=3))

    with raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "missing.pt")

    corrupt = tmp_path / "corrupt.pt"
    corrupt.write_bytes(b"not a checkpoint")
    with raises(CheckpointError, match="corrupt"):
        load_checkpoint(corrupt)

    old = tmp_path / "old.pt"
    torch.save({"format": -1}, old)
    with raises(CheckpointError, match="format"):
        load_checkpoint(old)
