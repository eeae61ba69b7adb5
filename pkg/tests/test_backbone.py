from math import floor

import torch
from pytest import approx, fixture, mark, raises


@fixture
def branch():
    from ckdtrack.backbone import Branch, ModelConfig

    torch.manual_seed(0)
    return Branch(ModelConfig())


@fixture
def seq(branch):
    from ckdtrack.backbone import concat_tokens, patch_embed

    generator = torch.Generator().manual_seed(1)
    search = torch.rand(2, 3, 64, 64, generator=generator)
    template = torch.rand(2, 1, 32, 32, generator=generator)
    return concat_tokens(
        patch_embed(search, branch, "search"), patch_embed(template, branch, "template")
    )


def test_model_config():
    from ckdtrack.backbone import ModelConfig
    from ckdtrack.errors import ConfigurationError

    config = ModelConfig()
    assert (config.grid, config.n_search, config.n_template) == (8, 64, 16)
    with raises(ConfigurationError):
        ModelConfig(channels=10, heads=4)
    with raises(ConfigurationError):
        ModelConfig(search_size=60)


def test_patch_embed_token_count(branch):
    from ckdtrack.backbone import patch_embed

    seq = patch_embed(torch.rand(1, 3, 64, 64), branch, "search")
    assert seq.tokens.shape == (1, 64, 64)
    assert (seq.n_search, seq.n_template) == (64, 0)


def test_zero_image_gives_position_embeddings(branch):
    from ckdtrack.backbone import patch_embed

    seq = patch_embed(torch.zeros(1, 3, 64, 64), branch, "search")
    assert torch.equal(seq.tokens, branch.pos_search.detach().expand(1, -1, -1))
    template = patch_embed(torch.zeros(1, 1, 32, 32), branch, "template")
    assert torch.equal(template.tokens, branch.pos_template.detach())


def test_constant_image_gives_identical_tokens(branch):
    from ckdtrack.backbone import patch_embed

    with torch.no_grad():
        branch.embed.weight.fill_(1 / 192)
        branch.pos_search.zero_()
    seq = patch_embed(torch.full((1, 3, 64, 64), 0.3), branch, "search")
    assert torch.allclose(seq.tokens, seq.tokens[:, :1].expand_as(seq.tokens))
    assert float(seq.tokens[0, 0, 0]) == approx(0.3)


def test_thermal_images_are_replicated(branch):
    from ckdtrack.backbone import patch_embed

    thermal = torch.rand(1, 1, 64, 64)
    single = patch_embed(thermal, branch, "search").tokens
    replicated = patch_embed(thermal.expand(-1, 3, -1, -1), branch, "search").tokens
    assert torch.equal(single, replicated)


def test_patchify():
    from ckdtrack.backbone import patchify
    from ckdtrack.errors import ConfigurationError

    image = torch.arange(16.0).reshape(1, 1, 4, 4)
    patches = patchify(image, 2)
    assert patches.shape == (1, 4, 4)
    assert patches[0, 0].tolist() == [0, 1, 4, 5]
    assert patches[0, 1].tolist() == [2, 3, 6, 7]
    with raises(ConfigurationError):
        patchify(torch.zeros(1, 3, 60, 64), 8)


@mark.parametrize("ratio", [0.0, 0.25, 0.5, 0.75])
def test_sample_mask_count(ratio):
    from ckdtrack.backbone import sample_mask

    for seed in range(100):
        mask = sample_mask(64, ratio, torch.Generator().manual_seed(seed))
        assert mask.dtype == torch.bool
        assert int(mask.sum()) == floor(ratio * 64)


def test_sample_mask_rounds_down_and_is_deterministic():
    from ckdtrack.backbone import sample_mask
    from ckdtrack.errors import ConfigurationError

    assert int(sample_mask(10, 0.75).sum()) == 7
    first = sample_mask(64, 0.25, torch.Generator().manual_seed(3))
    second = sample_mask(64, 0.25, torch.Generator().manual_seed(3))
    assert torch.equal(first, second)
    with raises(ConfigurationError):
        sample_mask(64, 1.0)


def test_apply_mask(seq, branch):
    from ckdtrack.backbone import apply_mask
    from ckdtrack.errors import ContractError

    none = torch.zeros(64, dtype=torch.bool)
    assert torch.equal(apply_mask(seq, none, branch).tokens, seq.tokens)

    one = none.clone()
    one[5] = True
    masked = apply_mask(seq, one, branch)
    changed = (masked.tokens != seq.tokens).any(dim=-1)
    assert changed[:, 5].all()
    changed[:, 5] = False
    assert not changed.any()

    with torch.no_grad():
        branch.mask_token.zero_()
    everything = apply_mask(seq, torch.ones(64, dtype=torch.bool), branch)
    assert torch.equal(
        everything.search, branch.pos_search.detach().expand_as(seq.search)
    )
    assert torch.equal(everything.template, seq.template)

    with raises(ContractError):
        apply_mask(seq, torch.zeros(10, dtype=torch.bool), branch)


def test_apply_mask_per_sample(seq, branch):
    from ckdtrack.backbone import apply_mask

    masks = torch.zeros(2, 64, dtype=torch.bool)
    masks[1, 0] = True
    masked = apply_mask(seq, masks, branch)
    assert torch.equal(masked.tokens[0], seq.tokens[0])
    assert not torch.equal(masked.tokens[1, 0], seq.tokens[1, 0])


def test_attention_rows_sum_to_one(seq, branch):
    from ckdtrack.backbone import block_forward

    out, attn = block_forward(seq, branch.blocks[0])
    assert attn.shape == (2, 4, 80, 80)
    assert torch.allclose(attn.sum(-1), torch.ones(2, 4, 80), atol=1e-6)
    assert out.tokens.shape == seq.tokens.shape


def test_single_token_attends_to_itself():
    from ckdtrack.backbone import Block, TokenSeq, block_forward

    _, attn = block_forward(TokenSeq(torch.rand(1, 1, 8), 1, 0), Block(8, 2))
    assert torch.equal(attn, torch.ones(1, 2, 1, 1))


def test_zero_output_projections_give_identity(seq, branch):
    from ckdtrack.backbone import block_forward

    block = branch.blocks[0]
    with torch.no_grad():
        for layer in (block.proj, block.fc2):
            layer.weight.zero_()
            layer.bias.zero_()
    out, _ = block_forward(seq, block)
    assert torch.equal(out.tokens, seq.tokens)


def test_block_rejects_non_finite_input(seq, branch):
    from ckdtrack.backbone import block_forward
    from ckdtrack.errors import NumericError

    tokens = seq.tokens.clone()
    tokens[0, 0, 0] = float("nan")
    with raises(NumericError):
        block_forward(seq.with_tokens(tokens), branch.blocks[0])


def test_forward_branch_without_elimination(seq, branch):
    from ckdtrack.backbone import forward_branch

    out = forward_branch(seq, branch)
    assert len(out.features) == len(out.attention) == 4
    for features in out.features:
        assert features.shape == (2, 80, 64)
    assert torch.equal(out.kept, torch.arange(64).expand(2, -1))
    assert out.final.tokens.shape == (2, 80, 64)


def test_keep_everything_matches_no_elimination(seq, branch):
    from ckdtrack.backbone import forward_branch
    from ckdtrack.elimination import EliminationConfig

    reference = forward_branch(seq, branch)
    kept = forward_branch(seq, branch, EliminationConfig(layers=(1, 2), keep_ratio=1.0))
    assert torch.allclose(kept.final.tokens, reference.final.tokens, atol=1e-6)
    assert torch.equal(kept.kept, reference.kept)


def test_elimination_halves_search_tokens(seq, branch):
    from ckdtrack.backbone import forward_branch
    from ckdtrack.elimination import EliminationConfig

    out = forward_branch(seq, branch, EliminationConfig(layers=(2,), keep_ratio=0.5))
    assert out.final.n_search == 32
    assert out.final.n_template == 16
    assert [f.shape[1] for f in out.features] == [80, 48, 48, 48]
    assert out.kept.shape == (2, 32)
    assert (out.kept[:, 1:] > out.kept[:, :-1]).all()


def test_elimination_layers_must_exist(seq, branch):
    from ckdtrack.backbone import forward_branch
    from ckdtrack.elimination import EliminationConfig
    from ckdtrack.errors import ConfigurationError

    with raises(ConfigurationError):
        forward_branch(seq, branch, EliminationConfig(layers=(5,)))


def test_forward_ckd_modes(tiny_model, batch):
    from ckdtrack.backbone import BRANCHES, STUDENTS, forward_ckd
    from ckdtrack.errors import ContractError

    model = tiny_model.double()
    train = forward_ckd(batch, model, "train")
    assert set(train) == set(BRANCHES)
    assert len({len(out.features) for out in train.values()}) == 1
    for out in train.values():
        assert out.features[-1].shape == (3, 20, 8)

    infer = forward_ckd(batch, model, "infer")
    assert set(infer) == set(STUDENTS)

    masks = {name: torch.zeros(3, 16, dtype=torch.bool) for name in STUDENTS}
    with raises(ContractError):
        forward_ckd(batch, model, "infer", masks)


def test_zero_ratio_masks_leave_students_unchanged(tiny_model, batch):
    from ckdtrack.backbone import STUDENTS, forward_ckd, sample_mask

    model = tiny_model.double()
    masks = {name: sample_mask(16, 0.0).expand(3, -1) for name in STUDENTS}
    masked = forward_ckd(batch, model, "train", masks)
    plain = forward_ckd(batch, model, "train")
    for name in STUDENTS:
        assert torch.equal(masked[name].final.tokens, plain[name].final.tokens)


def test_build_is_deterministic(tiny_config):
    from ckdtrack.backbone import FourBranchModel

    state = torch.get_rng_state()
    first = FourBranchModel.build(tiny_config, seed=4).state_dict()
    second = FourBranchModel.build(tiny_config, seed=4).state_dict()
    assert torch.equal(torch.get_rng_state(), state)
    assert first.keys() == second.keys()
    assert all(torch.equal(first[k], second[k]) for k in first)

    other = FourBranchModel.build(tiny_config, seed=5).state_dict()
    name = "branches.student_rgb.embed.weight"
    assert not torch.equal(first[name], other[name])


def test_branches_are_independent(tiny_model):
    from ckdtrack.backbone import BRANCHES

    weights = [tiny_model.branches[name].embed.weight for name in BRANCHES]
    assert len({w.shape for w in weights}) == 1
    assert not torch.equal(weights[0], weights[1])
    heads = tiny_model.heads
    assert heads["fused"].in_channels == 2 * heads["rgb"].in_channels
