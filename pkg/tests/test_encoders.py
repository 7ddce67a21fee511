import pytest
import torch
import torch.nn.functional as F

from encoders import (ClassVocabulary, FrozenTransformerTextEncoder, OracleImageEncoder, OracleTextEncoder,
                      PairedTokenizer, background_prompt_embedding, build_encoders, class_prompt_embeddings,
                      encode_image_patch, encode_region_tokens, ensemble_embeddings, read_name_list)
from toy_benchmark import BACKGROUND_COLOR, toy_classes

VOCAB = ClassVocabulary(("cat", "dog"), ("cow",), ("a photo of a {}.", "a {} in the scene."))


def full_mask(batch, length):
    return torch.ones(batch, length, dtype=torch.bool)


def paired_bundle(vocab=VOCAB, d_word=16, d_embed=8):
    palette = torch.tensor([c.color for c in toy_classes(vocab)])
    return build_encoders("paired", vocab, d_word, d_embed, palette=palette,
                          background_color=torch.tensor(BACKGROUND_COLOR))


def test_oracle_text_encoder_closed_form():
    encoder = OracleTextEncoder(8, 5, seed=3)
    tokens = torch.ones(1, 4, 8)
    out = encode_region_tokens(encoder, tokens, full_mask(1, 4), torch.tensor([3]))
    expected = F.normalize(encoder.projection @ torch.ones(8), dim=0)
    assert torch.allclose(out[0], expected, atol=1e-6)


def test_region_embeddings_are_unit_norm():
    encoder = OracleTextEncoder(8, 5)
    out = encode_region_tokens(encoder, torch.randn(6, 7, 8), full_mask(6, 7), torch.full((6,), 6))
    assert torch.allclose(out.norm(dim=-1), torch.ones(6), atol=1e-6)


@pytest.mark.parametrize("encoder", [OracleTextEncoder(8, 5), FrozenTransformerTextEncoder(8, 5, 16, num_heads=2)])
def test_padding_does_not_change_embeddings(encoder):
    seq = torch.randn(1, 4, 8)
    plain = encode_region_tokens(encoder, seq, full_mask(1, 4), torch.tensor([3]))
    padded = torch.cat([seq, torch.randn(1, 3, 8)], dim=1)
    mask = torch.tensor([[True] * 4 + [False] * 3])
    assert torch.allclose(encode_region_tokens(encoder, padded, mask, torch.tensor([3])), plain, atol=1e-5)


def test_gradient_reaches_tokens_but_not_encoder():
    encoder = FrozenTransformerTextEncoder(8, 5, 16, num_heads=2)
    tokens = torch.randn(2, 5, 8, requires_grad=True)
    out = encode_region_tokens(encoder, tokens, full_mask(2, 5), torch.tensor([4, 4]))
    out[:, 0].sum().backward()
    assert tokens.grad is not None and tokens.grad.abs().sum() > 0
    assert all(p.grad is None for p in encoder.parameters())


@pytest.mark.parametrize("seed", range(20))
def test_token_gradient_matches_finite_differences(seed):
    torch.manual_seed(seed)
    encoder = OracleTextEncoder(6, 4, seed=seed)
    tokens = torch.randn(2, 3, 6, dtype=torch.float64, requires_grad=True)

    def run(t):
        return encode_region_tokens(encoder, t, full_mask(2, 3), torch.tensor([2, 2]))

    assert torch.autograd.gradcheck(run, (tokens,), eps=1e-6, atol=1e-6, rtol=1e-4)


def test_encoders_stay_frozen_in_train_mode():
    encoder = FrozenTransformerTextEncoder(8, 5, 16, num_heads=2)
    before = {k: v.clone() for k, v in encoder.state_dict().items()}
    encoder.train()
    assert not encoder.training
    assert not any(p.requires_grad for p in encoder.parameters())
    assert all(torch.equal(before[k], v) for k, v in encoder.state_dict().items())


def test_region_token_checks():
    encoder = OracleTextEncoder(8, 5, context_length=4)
    with pytest.raises(ValueError):
        encode_region_tokens(encoder, torch.randn(1, 5, 8), full_mask(1, 5), torch.tensor([4]))
    with pytest.raises(ValueError):
        encode_region_tokens(encoder, torch.randn(1, 3, 7), full_mask(1, 3), torch.tensor([2]))
    mask = torch.tensor([[True, True, False]])
    with pytest.raises(ValueError):
        encode_region_tokens(encoder, torch.randn(1, 3, 8), mask, torch.tensor([2]))


def test_oracle_image_encoder_grey_patch():
    encoder = OracleImageEncoder(6, resolution=8)
    patch = torch.full((8, 8, 3), 0.5)
    out = encode_image_patch(encoder, patch)
    expected = F.normalize(encoder.projection @ torch.full((3,), 0.5), dim=0)
    assert torch.allclose(out[0], expected, atol=1e-6)
    assert torch.equal(encode_image_patch(encoder, patch), out)
    assert out.norm().item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        encode_image_patch(encoder, torch.zeros(1, 4, 4, 3))


def test_paired_oracle_maps_colour_and_prompt_to_same_anchor():
    bundle = paired_bundle()
    text = class_prompt_embeddings(bundle, VOCAB, "all")
    resolution = bundle.image.resolution
    for k, cls in enumerate(toy_classes(VOCAB)):
        patch = torch.tensor(cls.color).expand(resolution, resolution, 3)
        image = encode_image_patch(bundle.image, patch)[0]
        assert torch.dot(image, text[k]).item() > 0.999
        others = torch.cat([text[:k], text[k + 1:]])
        assert (others @ image).abs().max().item() < 1e-3


def test_paired_oracle_ignores_padding_pixels():
    bundle = paired_bundle()
    resolution = bundle.image.resolution
    colour = torch.tensor(toy_classes(VOCAB)[0].color)
    patch = torch.zeros(resolution, resolution, 3)
    patch[: resolution // 2] = colour
    full = colour.expand(resolution, resolution, 3)
    assert torch.allclose(encode_image_patch(bundle.image, patch), encode_image_patch(bundle.image, full), atol=1e-6)


def test_paired_tokenizer_needs_room_for_anchors():
    with pytest.raises(ValueError):
        PairedTokenizer(4, ["a", "b", "c"])


def test_paired_tokenizer_reserves_background():
    with pytest.raises(ValueError, match="background"):
        PairedTokenizer(16, ["cat", "background"])
    tokenizer = PairedTokenizer(16, ["cat", "dog"])
    assert torch.equal(tokenizer.class_vector("background"), F.one_hot(torch.tensor(2), 16).float())


def test_decayed_readout_weights_recent_tokens_most():
    encoder = OracleTextEncoder(3, 3, projection=torch.eye(3), decay=0.5)
    tokens = torch.tensor([[[9.0, 9.0, 9.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [7.0, 7.0, 7.0]]])
    raw = encoder(tokens, full_mask(1, 5), torch.tensor([4]))
    # weights 0.25, 0.5, 1 on the three interior tokens; START and END ignored
    assert torch.allclose(raw[0], torch.tensor([0.25, 0.5, 1.0]) / 1.75, atol=1e-6)
    assert encoder.readout_weights(full_mask(1, 5), torch.tensor([4])).tolist() == [[0.0, 0.25, 0.5, 1.0, 0.0]]


def test_unit_decay_is_a_plain_mean():
    encoder = OracleTextEncoder(3, 3, projection=torch.eye(3))
    tokens = torch.tensor([[[5.0, 5.0, 5.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [5.0, 5.0, 5.0], [0.0, 0.0, 0.0]]])
    mask = torch.tensor([[True, True, True, True, False]])
    assert torch.allclose(encoder(tokens, mask, torch.tensor([3]))[0], torch.tensor([1.5, 1.5, 0.0]))


def test_readout_needs_an_interior_token():
    encoder = OracleTextEncoder(3, 3, decay=0.8)
    with pytest.raises(ValueError, match="between START and END"):
        encoder(torch.randn(1, 2, 3), full_mask(1, 2), torch.tensor([1]))
    for decay in (0.0, 1.5):
        with pytest.raises(ValueError):
            OracleTextEncoder(3, 3, decay=decay)


def test_background_prompt_and_empty_patch_share_the_last_anchor():
    bundle = build_encoders("paired", VOCAB, 16, 8, readout_decay=0.8,
                            palette=torch.tensor([c.color for c in toy_classes(VOCAB)]),
                            background_color=torch.tensor(BACKGROUND_COLOR))
    anchor = bundle.image.anchors[-1]
    assert torch.allclose(background_prompt_embedding(bundle, VOCAB), anchor, atol=1e-5)
    resolution = bundle.image.resolution
    grey = torch.tensor(BACKGROUND_COLOR).expand(resolution, resolution, 3)
    assert torch.allclose(encode_image_patch(bundle.image, grey)[0], anchor, atol=1e-5)


def test_paired_oracle_counts_only_class_colours():
    bundle = paired_bundle()
    resolution = bundle.image.resolution
    colour = torch.tensor(toy_classes(VOCAB)[1].color)
    patch = torch.tensor(BACKGROUND_COLOR).repeat(resolution, resolution, 1)
    patch[: resolution // 4] = colour
    full = colour.expand(resolution, resolution, 3)
    assert torch.allclose(encode_image_patch(bundle.image, patch), encode_image_patch(bundle.image, full), atol=1e-6)


def test_prompt_embeddings_per_split():
    bundle = build_encoders("oracle", VOCAB, 8, 6)
    assert class_prompt_embeddings(bundle, VOCAB, "base").shape == (2, 6)
    assert class_prompt_embeddings(bundle, VOCAB, "all").shape == (3, 6)
    with pytest.raises(ValueError):
        class_prompt_embeddings(bundle, VOCAB, "novel")


def test_single_and_duplicate_templates():
    single = ClassVocabulary(("cat",), ("cow",), ("a photo of a {}.",))
    doubled = ClassVocabulary(("cat",), ("cow",), ("a photo of a {}.", "a photo of a {}."))
    bundle = build_encoders("oracle", single, 8, 6)
    seq = bundle.tokenizer.prompt_sequence("a photo of a {}.", "cat")[None]
    direct = encode_region_tokens(bundle.text, seq, full_mask(1, seq.shape[1]), torch.tensor([seq.shape[1] - 1]))
    ensembled = class_prompt_embeddings(bundle, single, "all")
    assert torch.allclose(ensembled[0], direct[0], atol=1e-6)
    assert torch.equal(class_prompt_embeddings(bundle, doubled, "all"), ensembled)


def test_ensemble_of_orthogonal_embeddings():
    e = torch.eye(3)[:2]
    out = ensemble_embeddings(e)
    assert torch.allclose(out, (e[0] + e[1]) / 2 ** 0.5)
    assert out.norm().item() == pytest.approx(1.0, abs=1e-6)


def test_prompt_sequence_layout():
    bundle = build_encoders("oracle", VOCAB, 8, 6)
    seq = bundle.tokenizer.prompt_sequence("a photo of a {}.", "cat")
    # START, a, photo, of, a, <cat>, ., END
    assert seq.shape == (8, 8)
    assert torch.equal(seq[5], bundle.tokenizer.class_vector("cat"))


def test_vocabulary_validation(tmp_path):
    with pytest.raises(ValueError):
        ClassVocabulary(("cat", "dog"), ("dog",))
    with pytest.raises(ValueError):
        ClassVocabulary(("cat",), ("cow",), ("no placeholder",))
    with pytest.raises(ValueError):
        VOCAB.classes("rare")
    assert VOCAB.split_of("cow") == "novel"
    path = tmp_path / "names.txt"
    path.write_text("# comment\ncat\n\n  dog  \n")
    assert read_name_list(path) == ["cat", "dog"]
    with pytest.raises(FileNotFoundError):
        read_name_list(tmp_path / "missing.txt")


def test_unknown_encoder_kind():
    with pytest.raises(ValueError):
        build_encoders("resnet", VOCAB, 8, 6)
