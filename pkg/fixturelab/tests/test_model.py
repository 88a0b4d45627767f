"""Tiny transformer: shapes, masking isolation, container round trip."""

from __future__ import annotations

import numpy as np
import torch

from fixturelab.archive_io import load_tensors, save_tensors
from fixturelab.model import ModelConfig, TinyGPT, fresh_model

torch.set_num_threads(1)


def test_parameter_budget():
    model = fresh_model(0)
    assert model.param_count() <= 1_000_000


def test_forward_shape():
    model = fresh_model(0)
    tokens = torch.randint(0, 256, (3, 16))
    logits = model(tokens)
    assert logits.shape == (3, 16, 256)


def test_causal_isolation():
    """Changing a future token never changes logits at earlier positions."""
    model = fresh_model(1).eval()
    tokens = torch.randint(0, 256, (1, 12))
    mutated = tokens.clone()
    mutated[0, 8] = (mutated[0, 8] + 1) % 256
    with torch.no_grad():
        base = model(tokens)
        changed = model(mutated)
    assert torch.allclose(base[0, :8], changed[0, :8], atol=1e-6)
    assert not torch.allclose(base[0, 8:], changed[0, 8:], atol=1e-6)


def test_document_mask_isolation():
    """With a two-segment mask, mutating segment two leaves segment one's
    logits untouched even at later positions."""
    model = fresh_model(2).eval()
    seq_len = 10
    allowed = torch.zeros(1, seq_len, seq_len, dtype=torch.bool)
    allowed[0, :5, :5] = torch.tril(torch.ones(5, 5, dtype=torch.bool))
    allowed[0, 5:, 5:] = torch.tril(torch.ones(5, 5, dtype=torch.bool))
    positions = torch.tensor([[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]])

    tokens = torch.randint(0, 256, (1, seq_len))
    mutated = tokens.clone()
    mutated[0, 6] = (mutated[0, 6] + 3) % 256
    with torch.no_grad():
        base = model(tokens, positions=positions, allowed=allowed)
        changed = model(mutated, positions=positions, allowed=allowed)
    assert torch.allclose(base[0, :5], changed[0, :5], atol=1e-6)


def test_fully_padded_rows_stay_finite():
    model = fresh_model(3)
    allowed = torch.zeros(1, 6, 6, dtype=torch.bool)  # nothing may attend
    tokens = torch.zeros(1, 6, dtype=torch.long)
    with torch.no_grad():
        logits = model(tokens, allowed=allowed)
    assert torch.isfinite(logits).all()


def test_greedy_complete_is_deterministic():
    model = fresh_model(4)
    prompt = [250, 10, 11, 12, 13, 251]
    first = model.greedy_complete(prompt, 4)
    second = model.greedy_complete(prompt, 4)
    assert first == second
    assert len(first) == 4


def test_export_load_round_trip_preserves_outputs(tmp_path):
    model = fresh_model(5).eval()
    path = tmp_path / "model.st"
    save_tensors(path, model.export_arrays(), {"resforge.family": "toygpt"})

    clone = TinyGPT(ModelConfig()).eval()
    arrays, metadata = load_tensors(path)
    clone.load_arrays(arrays)
    assert metadata["resforge.family"] == "toygpt"

    tokens = torch.randint(0, 256, (2, 8))
    with torch.no_grad():
        assert torch.equal(model(tokens), clone(tokens))


def test_export_arrays_cover_state_dict():
    model = fresh_model(6)
    arrays = model.export_arrays()
    assert set(arrays) == set(model.state_dict())
    for values in arrays.values():
        assert values.dtype == np.float32
