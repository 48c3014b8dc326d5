from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from dcglr import data
from dcglr.data import DataError, OffMesh, OffParseError
from dcglr.evaluate import linear_probe

FIXTURES = Path(__file__).parent / "fixtures"


class TestSynthetic:
    def test_noiseless_sphere_on_unit_sphere(self):
        pts = data.synth_cloud("sphere", 512, noise_sigma=0.0, seed=3)
        r = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
        np.testing.assert_allclose(r, 1.0, atol=1e-9)

    def test_balanced_counts(self):
        ds = data.synth_dataset(per_class=50, n_points=64, seed=0)
        assert len(ds) == 300
        assert np.bincount(ds.labels).tolist() == [50] * 6
        assert np.bincount(ds.labels[~ds.split]).tolist() == [10] * 6

    def test_byte_identical_regeneration(self):
        a = data.synth_dataset(per_class=4, n_points=64, seed=11)
        b = data.synth_dataset(per_class=4, n_points=64, seed=11)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.clouds, b.clouds))
        np.testing.assert_array_equal(a.split, b.split)

    def test_seeds_differ(self):
        a = data.synth_dataset(per_class=2, n_points=32, seed=1)
        b = data.synth_dataset(per_class=2, n_points=32, seed=2)
        assert not np.array_equal(a.clouds[0], b.clouds[0])

    @pytest.mark.parametrize("shape", data.SHAPES)
    def test_every_shape_normalized(self, shape):
        pts = data.synth_cloud(shape, 200, 0.01, seed=0)
        assert pts.shape == (200, 3)
        np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=1e-12)
        assert np.linalg.norm(pts, axis=1).max() == pytest.approx(1.0)

    def test_unknown_shape(self):
        with pytest.raises(DataError):
            data.synth_cloud("teapot", 10)

    def test_rotation_is_proper(self):
        r = data.random_rotation(np.random.default_rng(0))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_moment_features_beat_chance(self):
        ds = data.synth_dataset(per_class=30, n_points=256, seed=5)

        def moments(p):
            ev = np.sort(np.linalg.eigvalsh(np.cov(p.T)))
            r = np.linalg.norm(p, axis=1)
            return np.concatenate([ev, [r.mean(), r.std(), (r ** 3).mean()]])

        X = np.stack([moments(c) for c in ds.clouds])
        res = linear_probe(X, ds.labels, ds.split, epochs=500)
        assert res.accuracy > 1 / 6 + 0.2

    def test_subsets(self):
        ds = data.synth_dataset(per_class=5, n_points=32, seed=0)
        assert len(ds.train) + len(ds.test) == len(ds)
        assert ds.test.split.sum() == 0

    def test_bad_labels(self):
        with pytest.raises(DataError):
            data.Dataset([np.zeros((3, 3))], [2], ["a", "b"])


class TestOff:
    def test_tetrahedron(self):
        mesh = data.load_off(FIXTURES / "tetrahedron.off")
        assert mesh.vertices.shape == (4, 3)
        assert mesh.faces.shape == (4, 3)

    def test_fused_header_quad_fans(self):
        mesh = data.load_off(FIXTURES / "quad_fused.off")
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])
        assert data.triangle_areas(mesh).sum() == pytest.approx(1.0)

    def test_comments_blank_lines_and_colours(self):
        mesh = data.load_off(FIXTURES / "pyramid_colors.off")
        assert mesh.vertices.shape == (5, 3)
        assert len(mesh.faces) == 3

    def test_serialize_round_trip(self):
        for name in ("tetrahedron.off", "quad_fused.off", "pyramid_colors.off"):
            mesh = data.load_off(FIXTURES / name)
            back = data.parse_off(data.format_off(mesh))
            np.testing.assert_array_equal(back.vertices, mesh.vertices)
            np.testing.assert_array_equal(back.faces, mesh.faces)

    @pytest.mark.parametrize("text, line", [
        ("", 1),
        ("PLY\n", 1),
        ("OFF\n", 1),
        ("OFF\n3 x 0\n", 2),
        ("OFF\n3 1 0\n0 0 0\n1 0 0\n", 2),
        ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n", 6),
        ("OFF\n3 1 0\n0 0 0\n1 0\n0 1 0\n3 0 1 2\n", 4),
        ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n2 0 1\n", 6),
        ("OFF\n3 1 0\n0 0 nan\n1 0 0\n0 1 0\n3 0 1 2\n", 3),
    ])
    def test_errors_carry_line(self, text, line):
        with pytest.raises(OffParseError) as info:
            data.parse_off(text)
        assert info.value.line == line

    def test_fuzzed_inputs_never_crash(self):
        seeds = [(FIXTURES / n).read_text() for n in
                 ("tetrahedron.off", "quad_fused.off", "pyramid_colors.off")]
        for i, text in enumerate(fuzz_cases(seeds, 1000, np.random.default_rng(0))):
            try:
                mesh = data.parse_off(text)
            except OffParseError as exc:
                assert exc.line is None or exc.line >= 1
            else:
                assert mesh.faces.size == 0 or mesh.faces.max() < len(mesh.vertices)


def fuzz_cases(seeds, count, rng):
    """Truncations, byte flips, token deletions and digit inflation of valid files."""
    alphabet = "0123456789 -.e\n#OFFx"
    for _ in range(count):
        text = seeds[rng.integers(len(seeds))]
        kind = rng.integers(4)
        if kind == 0:
            text = text[:rng.integers(len(text) + 1)]
        elif kind == 1:
            chars = list(text)
            for _ in range(rng.integers(1, 6)):
                chars[rng.integers(len(chars))] = alphabet[rng.integers(len(alphabet))]
            text = "".join(chars)
        elif kind == 2:
            tokens = text.split(" ")
            del tokens[rng.integers(len(tokens))]
            text = " ".join(tokens)
        else:
            pos = rng.integers(len(text))
            text = text[:pos] + "9" * int(rng.integers(1, 30)) + text[pos:]
        yield text


class TestSampling:
    def test_single_triangle_barycentric(self):
        v = np.array([[0.0, 0, 0], [2, 0, 0], [0, 1, 1]])
        mesh = OffMesh(v, np.array([[0, 1, 2]]))
        pts = data.sample_mesh(mesh, 2000, seed=0)
        coeffs, *_ = np.linalg.lstsq(np.stack([v[1] - v[0], v[2] - v[0]], axis=1), (pts - v[0]).T,
                                     rcond=None)
        u, w = coeffs
        assert np.all(u >= -1e-12) and np.all(w >= -1e-12)
        assert np.all(u + w <= 1 + 1e-12)

    def test_area_weighting_binomial(self):
        # areas 1 and 3
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]])
        mesh = OffMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
        np.testing.assert_allclose(data.triangle_areas(mesh), [1.0, 3.0])
        pts = data.sample_mesh(mesh, 10000, seed=1)
        first = int((pts[:, 0] < 5).sum())
        assert stats.binomtest(first, 10000, 0.25).pvalue > 0.001

    def test_zero_area_triangle_never_sampled(self):
        v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 6, 6], [7, 7, 7]])
        mesh = OffMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
        pts = data.sample_mesh(mesh, 500, seed=0)
        assert np.all(pts[:, 2] == 0)

    def test_all_degenerate(self):
        mesh = OffMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(DataError):
            data.sample_mesh(mesh, 10)


class TestContainer:
    def test_pcb_round_trip_bit_exact(self, tmp_path):
        ds = data.synth_dataset(per_class=3, n_points=50, seed=2)
        ds.clouds[0] = ds.clouds[0][:17]  # ragged sizes are allowed
        data.write_pcb(tmp_path / "a.pcb", ds)
        clouds, labels = data.read_pcb(tmp_path / "a.pcb")
        np.testing.assert_array_equal(labels, ds.labels)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(clouds, ds.clouds))

    def test_layout(self, tmp_path):
        ds = data.Dataset([np.arange(6.0).reshape(2, 3)], [0], ["a"])
        data.write_pcb(tmp_path / "a.pcb", ds)
        raw = (tmp_path / "a.pcb").read_bytes()
        assert raw[:4] == b"PCB1"
        assert raw[4:8] == (1).to_bytes(4, "little")
        assert raw[8:16] == (0).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(raw[16:], dtype="<f8").tolist() == list(range(6))

    @pytest.mark.parametrize("cut", [3, 10, 20, -1])
    def test_truncated_and_bad_magic(self, tmp_path, cut):
        ds = data.Dataset([np.ones((2, 3))], [0], ["a"])
        data.write_pcb(tmp_path / "a.pcb", ds)
        raw = (tmp_path / "a.pcb").read_bytes()
        (tmp_path / "b.pcb").write_bytes(raw[:cut])
        with pytest.raises(DataError):
            data.read_pcb(tmp_path / "b.pcb")

    def test_trailing_bytes(self, tmp_path):
        data.write_pcb(tmp_path / "a.pcb", data.Dataset([np.ones((2, 3))], [0], ["a"]))
        with open(tmp_path / "a.pcb", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(DataError):
            data.read_pcb(tmp_path / "a.pcb")

    def test_manifest_round_trip(self, tmp_path):
        ds = data.synth_dataset(per_class=3, n_points=40, seed=4)
        manifest = data.save_dataset(tmp_path, ds, {"seed": 4})
        back = data.load_dataset(manifest)
        assert back.class_names == ds.class_names
        np.testing.assert_array_equal(back.split, ds.split)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(back.clouds, ds.clouds))

    def test_manifest_missing(self, tmp_path):
        with pytest.raises(DataError):
            data.load_dataset(tmp_path / "none.json")

    @pytest.mark.parametrize("body", ['{"class_names": []}', '{"files": []}', '[1, 2]'])
    def test_manifest_missing_keys(self, tmp_path, body):
        (tmp_path / "m.json").write_text(body)
        with pytest.raises(DataError, match="lacks"):
            data.load_dataset(tmp_path / "m.json")
