import json
import struct

import numpy as np
import pytest

from mdgcl.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mdgcl.errors import FormatError, ValidationError
from mdgcl.graph import FeatureGraph
from mdgcl.io import export_embeddings, load_graph, read_embeddings, save_graph
from mdgcl.synth import SynthDomainConfig, community_means, generate_synthetic_domain


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return path


def minimal(**over):
    base = {"schema": "mdgcl-graph-v1", "domain": "toy", "num_nodes": 2, "edges": [[0, 1]],
            "features": [[1.0, 2.0], [3.0, 4.0]]}
    base.update(over)
    return base


def test_load_minimal_graph(tmp_path):
    g = load_graph(write_json(tmp_path / "g.json", minimal()))
    assert g.num_nodes == 2 and g.num_edges == 1 and g.dim == 2
    assert g.labels is None and g.name == "toy"


def test_bad_edge_is_named(tmp_path):
    path = write_json(tmp_path / "g.json", minimal(num_nodes=3, edges=[[0, 5]], features=[[0.0]] * 3))
    with pytest.raises(ValidationError, match=r"\[0, 5\]"):
        load_graph(path)


def test_ragged_features(tmp_path):
    with pytest.raises(ValidationError, match="ragged"):
        load_graph(write_json(tmp_path / "g.json", minimal(features=[[1.0, 2.0], [3.0]])))


def test_malformed_json(tmp_path):
    path = tmp_path / "g.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_graph(path)


def test_wrong_schema(tmp_path):
    with pytest.raises(FormatError):
        load_graph(write_json(tmp_path / "g.json", minimal(schema="other")))


def test_graph_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    g = FeatureGraph(4, [(0, 1), (2, 3), (1, 3)], rng.normal(size=(4, 3)), [0, None, 1, 1], name="d")
    save_graph(tmp_path / "g.json", g)
    back = load_graph(tmp_path / "g.json")
    assert back.same_as(g)
    save_graph(tmp_path / "h.json", back)
    assert (tmp_path / "g.json").read_bytes() == (tmp_path / "h.json").read_bytes()


def test_checkpoint_single_tensor(tmp_path):
    ckpt = Checkpoint({"w": np.array([[1.0, -2.5], [np.pi, 1e-300]])})
    save_checkpoint(tmp_path / "c.bin", ckpt)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back["w"].tobytes() == ckpt["w"].tobytes()


def test_checkpoint_layout_is_exact():
    raw = Checkpoint({"ab": np.array([[1.0, 2.0]])}).to_bytes()
    expected = (b"MDGC" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<B", 2)
                + struct.pack("<II", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert raw == expected


def test_checkpoint_bad_magic(tmp_path):
    raw = Checkpoint({"w": np.eye(2)}).to_bytes()
    (tmp_path / "c.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "c.bin")


def test_checkpoint_unknown_version():
    raw = Checkpoint({"w": np.eye(2)}).to_bytes()
    with pytest.raises(FormatError, match="version"):
        Checkpoint.from_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])


def test_checkpoint_truncated_and_trailing():
    raw = Checkpoint({"w": np.eye(2)}).to_bytes()
    for cut in (3, 10, len(raw) - 1):
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(raw[:cut])
    with pytest.raises(FormatError, match="trailing"):
        Checkpoint.from_bytes(raw + b"\0")


def test_checkpoint_random_tensors_two_cycles(tmp_path):
    rng = np.random.default_rng(7)
    ckpt = Checkpoint()
    for i in range(10):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=rng.integers(0, 4)))
        ckpt[f"t{i}"] = rng.normal(size=shape)
    first = ckpt.to_bytes()
    second = Checkpoint.from_bytes(first).to_bytes()
    third = Checkpoint.from_bytes(second).to_bytes()
    assert first == second == third
    back = Checkpoint.from_bytes(first)
    assert back.names() == ckpt.names()
    for name in ckpt:
        assert back[name].shape == ckpt[name].shape


def test_checkpoint_rejects_non_finite():
    with pytest.raises(ValidationError):
        Checkpoint({"w": np.array([np.nan])})


def test_synth_degenerate_probabilities():
    g = generate_synthetic_domain(SynthDomainConfig(num_nodes=6, num_communities=2, p_in=1.0, p_out=0.0), seed=0)
    # round-robin communities: {0,2,4} and {1,3,5}
    assert g.edges.tolist() == [[0, 2], [0, 4], [1, 3], [1, 5], [2, 4], [3, 5]]
    assert g.labels.tolist() == [0, 1, 0, 1, 0, 1]


def test_synth_deterministic():
    cfg = SynthDomainConfig(num_nodes=50)
    assert generate_synthetic_domain(cfg, 3).same_as(generate_synthetic_domain(cfg, 3))
    assert not generate_synthetic_domain(cfg, 3).same_as(generate_synthetic_domain(cfg, 4))


def test_synth_intra_density():
    cfg = SynthDomainConfig(num_nodes=2000, num_communities=4, p_in=0.1, p_out=0.01, feature_dim=2)
    g = generate_synthetic_domain(cfg, seed=5)
    comm = g.labels
    intra_edges = int(np.sum(comm[g.edges[:, 0]] == comm[g.edges[:, 1]]))
    size = 2000 // 4
    intra_pairs = 4 * size * (size - 1) // 2
    assert abs(intra_edges / intra_pairs - 0.1) <= 0.01


def test_synth_invalid_config():
    with pytest.raises(ValidationError):
        generate_synthetic_domain(SynthDomainConfig(p_in=1.5), 0)
    with pytest.raises(ValidationError):
        generate_synthetic_domain(SynthDomainConfig(num_nodes=3, num_communities=4), 0)


def test_synth_rotation_seed_controls_means():
    a = SynthDomainConfig(basis_rotation_seed=1)
    b = SynthDomainConfig(basis_rotation_seed=1, p_in=0.2)
    c = SynthDomainConfig(basis_rotation_seed=2)
    assert np.array_equal(community_means(a), community_means(b))
    ma, mc = community_means(a), community_means(c)
    assert not np.allclose(ma, mc)
    # an orthogonal rotation keeps the Gram matrix of the means
    np.testing.assert_allclose(ma @ ma.T, mc @ mc.T, atol=1e-10)
    noiseless = generate_synthetic_domain(SynthDomainConfig(basis_rotation_seed=1, noise_std=0.0), 0)
    np.testing.assert_allclose(noiseless.features[:3], ma, atol=1e-12)


def test_export_embeddings(tmp_path):
    h = np.array([[1.0, 2.0], [0.1, 1 / 3], [-1e-17, 5e300]])
    export_embeddings(h, [0, None, 2], [0, 0, 1], tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0] == "node_id,domain,label,e0,e1"
    back, labels, domains = read_embeddings(tmp_path / "e.csv")
    assert labels == [0, None, 2] and domains == [0, 0, 1]
    np.testing.assert_allclose(back, h, rtol=1e-15, atol=0)


def test_export_random_parse_back(tmp_path):
    h = np.random.default_rng(0).normal(size=(20, 6)) * 10.0 ** np.arange(-3, 3)
    export_embeddings(h, list(range(20)), [1] * 20, tmp_path / "e.csv")
    back, _, _ = read_embeddings(tmp_path / "e.csv")
    assert np.all(np.abs(back - h) <= 1e-15 * np.abs(h))


def test_export_empty(tmp_path):
    export_embeddings(np.zeros((0, 3)), [], [], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines() == ["node_id,domain,label,e0,e1,e2"]


def test_export_deterministic(tmp_path):
    h = np.random.default_rng(1).normal(size=(5, 2))
    export_embeddings(h, [0] * 5, [0] * 5, tmp_path / "a.csv")
    export_embeddings(h, [0] * 5, [0] * 5, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_export_unwritable(tmp_path):
    with pytest.raises(OSError):
        export_embeddings(np.zeros((1, 1)), [0], [0], tmp_path / "missing" / "e.csv")
