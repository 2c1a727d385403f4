import numpy as np
import pytest
import torch

from krsvqg.model import (COMPONENTS, KRSVQG, DecodingParams, Features, ModelConfig, beam_search,
                          greedy_search)
from krsvqg.tokenizer import BOS, EOS, encode
from krsvqg.training import next_token_loss


def _image(seed, size=16):
    return np.random.default_rng(seed).random((size, size, 3))


def _ids(text, vocab, n=12):
    return encode(text, vocab, n)


@pytest.fixture
def sample(fixture_set, vocab):
    records, images = fixture_set
    r = records[0]
    return images[r["image"]], _ids(r["caption"], vocab), _ids(r["knowledge_sentence"], vocab), \
        _ids(r["question"], vocab)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, width=10, heads=4)
    cfg = ModelConfig.full_size(vocab_size=10)
    assert (cfg.image_size, cfg.patch_size, cfg.width, cfg.heads) == (384, 16, 768, 12)


def test_image_feature_length(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), image_size=32, patch_size=8, width=16, heads=2)
    f = KRSVQG(cfg).encode_image(_image(0, 32))
    assert f.values.shape == (1, 17, 16)


def test_image_encoder_distinguishes_images(tiny_model):
    a = tiny_model.encode_image(_image(1)).values
    b = tiny_model.encode_image(_image(2)).values
    assert not torch.allclose(a, b)


def test_zero_image_patch_embeddings_equal_bias(tiny_model):
    enc = tiny_model.image_encoder
    with torch.no_grad():
        enc.pos_embed.zero_()
        enc.patch_embed.bias.normal_()
    emb = enc.patch_embeddings(torch.zeros(1, 16, 16, 3))
    assert torch.equal(emb[0], enc.patch_embed.bias.expand(4, -1))


def test_wrong_image_shape(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.encode_image(np.zeros((8, 8, 3)))


def test_caption_logits_shape_and_causality(tiny_model, sample, vocab):
    img, cap, _, _ = sample
    f_i = tiny_model.encode_image(img)
    f_c, logits = tiny_model.caption_forward(f_i, cap)
    assert logits.shape == (1, cap.length, len(vocab))
    assert f_c.length == cap.length
    ids = torch.tensor([cap.ids])[:, :cap.length]
    for j in range(1, cap.length):
        alt = ids.clone()
        alt[0, j] = (alt[0, j] + 1) % len(vocab)
        _, alt_logits = tiny_model.caption_forward(f_i, alt)
        assert torch.equal(alt_logits[0, :j], logits[0, :j])


def test_caption_depends_on_image(tiny_model, sample):
    _, cap, _, _ = sample
    _, a = tiny_model.caption_forward(tiny_model.encode_image(_image(3)), cap)
    _, b = tiny_model.caption_forward(tiny_model.encode_image(_image(4)), cap)
    assert torch.all((a - b).abs().amax(-1) > 0)


def test_caption_too_long(tiny_model, sample):
    img, _, _, _ = sample
    with pytest.raises(ValueError, match="exceeds"):
        tiny_model.caption_forward(tiny_model.encode_image(img), [[BOS] + [5] * 20 + [EOS]])


def test_knowledge_encoder_is_bidirectional(tiny_model, sample, vocab):
    img, _, know, _ = sample
    f_i = tiny_model.encode_image(img)
    f_t = tiny_model.encode_knowledge(know, f_i)
    assert f_t.length == know.length
    ids = torch.tensor([know.ids])[:, :know.length]
    alt = ids.clone()
    j = know.length - 2
    alt[0, j] = (alt[0, j] + 1) % len(vocab)
    alt_t = tiny_model.encode_knowledge(alt, f_i)
    assert not torch.allclose(alt_t.values[0, :j], f_t.values[0, :j])
    other = tiny_model.encode_knowledge(know, tiny_model.encode_image(_image(9)))
    assert not torch.allclose(other.values, f_t.values)


def test_empty_knowledge_rejected(tiny_model, sample):
    img = sample[0]
    with pytest.raises(ValueError, match="knowledge required"):
        tiny_model.encode_knowledge([[0, 0, 0]], tiny_model.encode_image(img))


def test_question_cross_attends_over_concatenation(tiny_model, sample, vocab):
    img, cap, know, q = sample
    f_i = tiny_model.encode_image(img)
    f_c, _ = tiny_model.caption_forward(f_i, cap)
    f_t = tiny_model.encode_knowledge(know, f_i)
    seen = {}
    attn = tiny_model.question_decoder.blocks[0].cross_attn

    def hook(module, inputs, output):
        seen["keys"] = output.shape[1]

    handle = attn.key.register_forward_hook(hook)
    logits = tiny_model.question_forward(f_c, f_t, q)
    handle.remove()
    assert seen["keys"] == f_c.length + f_t.length
    assert logits.shape == (1, q.length, len(vocab))

    zero_t = Features(torch.zeros_like(f_t.values), "knowledge", f_t.padding)
    zero_c = Features(torch.zeros_like(f_c.values), "caption", f_c.padding)
    assert not torch.allclose(tiny_model.question_forward(f_c, zero_t, q), logits)
    assert not torch.allclose(tiny_model.question_forward(zero_c, f_t, q), logits)


def test_question_causality(tiny_model, sample, vocab):
    img, cap, know, q = sample
    f_i = tiny_model.encode_image(img)
    f_c, _ = tiny_model.caption_forward(f_i, cap)
    f_t = tiny_model.encode_knowledge(know, f_i)
    base = tiny_model.question_forward(f_c, f_t, q)
    ids = torch.tensor([q.ids])[:, :q.length]
    for j in range(1, q.length):
        alt = ids.clone()
        alt[0, j] = (alt[0, j] + 3) % len(vocab)
        assert torch.equal(tiny_model.question_forward(f_c, f_t, alt)[0, :j], base[0, :j])


def test_question_width_mismatch(tiny_model, sample):
    img, cap, know, q = sample
    f_i = tiny_model.encode_image(img)
    f_c, _ = tiny_model.caption_forward(f_i, cap)
    f_t = tiny_model.encode_knowledge(know, f_i)
    bad = Features(torch.zeros(1, 3, 8), "knowledge")
    with pytest.raises(ValueError, match="widths"):
        tiny_model.question_forward(f_c, bad, q)


def test_generation_is_deterministic_and_beam1_is_greedy(tiny_model, sample):
    img, _, know, _ = sample
    f_i = tiny_model.encode_image(img)
    c1, fc1 = tiny_model.generate_caption(f_i)
    c2, _ = tiny_model.generate_caption(f_i)
    c3, _ = tiny_model.generate_caption(f_i, DecodingParams(beam_size=1))
    assert c1 == c2 == c3
    assert fc1.length == c1.length
    f_t = tiny_model.encode_knowledge(know, f_i)
    assert tiny_model.generate_question(fc1, f_t) == tiny_model.generate_question(fc1, f_t)


def test_beam_one_matches_greedy_on_random_steps():
    torch.manual_seed(10)
    table = torch.randn(6, 7).log_softmax(-1)
    step = lambda prefix: table[len(prefix[0]) - 1]
    assert beam_search(step, 6, 1) == greedy_search(step, 6)


def test_beam_search_finds_better_sequence_than_greedy():
    # greedy takes token 3 (p=0.6) and then is forced into low-probability continuations
    def step(prefix):
        ids = prefix[0].tolist()
        probs = torch.full((5,), 1e-6)
        if len(ids) == 1:
            probs[3], probs[4] = 0.6, 0.4
        elif ids[-1] == 3:
            probs[EOS] = 0.3
            probs[0] = 0.7
        elif ids[-1] == 4:
            probs[EOS] = 1.0
        else:
            probs[EOS] = 0.1
            probs[1] = 0.9
        return (probs / probs.sum()).log()

    assert greedy_search(step, 4)[:2] == [BOS, 3]
    assert beam_search(step, 4, 2) == [BOS, 4, EOS]


def test_component_prefixes(tiny_model):
    prefixes = {n.split(".", 1)[0] for n, _ in tiny_model.named_parameters()}
    assert prefixes == set(COMPONENTS)


def test_caption_loss_touches_only_vision(tiny_model, sample):
    img, cap, know, q = sample
    f_i = tiny_model.encode_image(img)
    _, logits = tiny_model.caption_forward(f_i, cap)
    next_token_loss(logits, torch.tensor([cap.ids])).backward()
    for name, p in tiny_model.named_parameters():
        vision = name.startswith(("image_encoder", "caption_decoder"))
        assert (p.grad is not None and p.grad.abs().sum() > 0) == vision, name


def test_question_loss_reaches_every_component(tiny_model, sample):
    img, cap, know, q = sample
    _, q_logits = tiny_model(img, cap, know, q)
    next_token_loss(q_logits, torch.tensor([q.ids])).backward()
    for comp in COMPONENTS:
        grads = [p.grad for n, p in tiny_model.named_parameters() if n.startswith(comp)]
        assert any(g is not None and g.abs().sum() > 0 for g in grads), comp
