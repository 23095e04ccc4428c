import dataclasses
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexoffload.errors import InvalidParameterError
from flexoffload.manifest import (
    LAYER_ROLES,
    LayerSpec,
    Role,
    dumps_manifest,
    generate_manifest,
    loads_manifest,
    tensor_pattern,
    validate_manifest,
    write_blob,
)


def test_example_sizes():
    m = generate_manifest(2, 1024, 3072, None, 512, 512)
    assert m.n_layers == 2
    assert [layer.size_bytes for layer in m.layers] == [13312, 13312]
    assert m.total_bytes == 27648
    # checked by summing the generated tensors, not the formula
    assert sum(t.size_bytes for t in m.all_tensors()) == 27648
    assert validate_manifest(m) == []


def test_unit_ratio():
    m = generate_manifest(1, 1, 3, None, 1, 1)
    assert m.layers[0].size_bytes == 13
    assert m.role_size(Role.ATTN_Q) * 3 == m.role_size(Role.FFN_UP)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n_layers=1, attn_tensor_bytes=1024, ffn_tensor_bytes=3072, gqa_kv_bytes=2048),
        dict(n_layers=0, attn_tensor_bytes=1, ffn_tensor_bytes=3),
        dict(n_layers=1, attn_tensor_bytes=0, ffn_tensor_bytes=3),
        dict(n_layers=1, attn_tensor_bytes=1, ffn_tensor_bytes=-3),
        dict(n_layers=1, attn_tensor_bytes=1, ffn_tensor_bytes=3, alignment=48),
    ],
)
def test_invalid_parameters(kwargs):
    with pytest.raises(InvalidParameterError):
        generate_manifest(**kwargs)


def test_gqa_shrinks_kv_only():
    m = generate_manifest(2, 1024, 3072, gqa_kv_bytes=256, alignment=256)
    sizes = {t.role: t.size_bytes for t in m.layers[1].tensors}
    assert sizes[Role.ATTN_K] == sizes[Role.ATTN_V] == 256
    assert sizes[Role.ATTN_Q] == sizes[Role.ATTN_O] == 1024


def test_offsets_strictly_increasing_and_aligned():
    m = generate_manifest(3, 1000, 3000, embed_bytes=700, alignment=512)
    offsets = [t.blob_offset for t in m.all_tensors()]
    assert offsets == sorted(set(offsets))
    assert all(o % 512 == 0 for o in offsets)
    assert [t.role for t in m.layers[0].tensors] == list(LAYER_ROLES)
    assert m.all_tensors().__next__().role == Role.EMBED_IN


def test_overlap_is_reported_with_both_names():
    m = generate_manifest(2, 1024, 3072, alignment=1024)
    layer0 = m.layers[0]
    k = layer0.tensors[1]
    bad_k = dataclasses.replace(k, blob_offset=layer0.tensors[0].blob_offset)
    bad = dataclasses.replace(m, layers=(LayerSpec(0, (layer0.tensors[0], bad_k, *layer0.tensors[2:])), m.layers[1]))
    problems = validate_manifest(bad)
    overlap = [p for p in problems if "overlap" in p]
    assert len(overlap) == 1
    assert "layers.0.attn_q" in overlap[0] and "layers.0.attn_k" in overlap[0]


def test_layer_shape_mismatch():
    m = generate_manifest(2, 1024, 3072, alignment=1024)
    layer1 = m.layers[1]
    # drop DOWN and duplicate UP as an extra FFN tensor: 2 FFN-role entries differ from the reference
    trimmed = LayerSpec(1, layer1.tensors[:-1])
    bad = dataclasses.replace(m, layers=(m.layers[0], trimmed))
    problems = validate_manifest(bad)
    assert any("layer 1: layer shape mismatch" in p for p in problems)


def test_unaligned_and_total_violations():
    m = generate_manifest(1, 1024, 3072, alignment=1024)
    t = m.layers[0].tensors[0]
    moved = dataclasses.replace(t, blob_offset=t.blob_offset + 1)
    bad = dataclasses.replace(
        m, layers=(LayerSpec(0, (moved, *m.layers[0].tensors[1:])),), total_bytes=m.total_bytes + 1
    )
    problems = validate_manifest(bad)
    assert any("not a multiple of alignment" in p for p in problems)
    assert any("total_bytes" in p for p in problems)


def test_serialization_format_is_exact():
    m = generate_manifest(1, 1, 3, None, 2, 1)
    text = dumps_manifest(m)
    lines = text.splitlines()
    assert lines[0] == "FLEXMODEL\t1\t1\t1"
    assert lines[1] == "TENSOR\t-1\tembed_in\tEMBED_IN\t2\t0"
    assert lines[2] == "TENSOR\t0\tlayers.0.attn_q\tATTN_Q\t1\t2"
    assert lines[-1] == "TENSOR\t-1\tembed_out\tEMBED_OUT\t2\t15"
    assert len(lines) == 1 + 7 + 2


manifests = st.builds(
    generate_manifest,
    n_layers=st.integers(1, 12),
    attn_tensor_bytes=st.integers(1, 5000),
    ffn_tensor_bytes=st.integers(1, 15000),
    gqa_kv_bytes=st.none(),
    embed_bytes=st.integers(0, 3000),
    alignment=st.sampled_from([1, 8, 512, 4096]),
)


@given(manifests)
@settings(max_examples=150, deadline=None)
def test_roundtrip_and_invariants(m):
    assert loads_manifest(dumps_manifest(m)) == m
    assert validate_manifest(m) == []
    assert m.layers[0].size_bytes * m.n_layers + m.embedding_bytes == m.total_bytes
    offsets = [t.blob_offset for t in m.all_tensors()]
    assert all(b > a for a, b in zip(offsets, offsets[1:]))
    assert all(o % m.alignment == 0 for o in offsets)


def test_blob_determinism_and_layout(tmp_path):
    m = generate_manifest(2, 1024, 3072, None, 512, 512)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    write_blob(m, a, seed=1)
    write_blob(m, b, seed=1)
    write_blob(m, c, seed=2)
    assert a.read_bytes() == b.read_bytes()
    last = max(m.all_tensors(), key=lambda t: t.blob_offset)
    assert os.path.getsize(a) == last.blob_offset + last.size_bytes
    assert os.path.getsize(c) == os.path.getsize(a)
    assert a.read_bytes() != c.read_bytes()
    t = m.layers[1].tensors[4]
    data = a.read_bytes()
    assert data[t.blob_offset : t.end] == tensor_pattern(1, t.name, t.size_bytes)
