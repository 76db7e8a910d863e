import numpy as np
import pytest

from hybridbev import bench, cli
from hybridbev import tensor as T
from hybridbev.checkpoint import Checkpoint
from hybridbev.contribution import read_pgm
from hybridbev.geometry import BevGrid
from hybridbev.model import InputError, ModelConfig, init_model, model_forward
from hybridbev.pipeline import DUMPABLE, checkpoint_model, detect, run_forward
from hybridbev.synth import gen_scene, write_scene

MODEL = ModelConfig()


def ckpt_for(variant, seed=0):
    P = init_model(np.random.default_rng(seed), MODEL, variant)
    return Checkpoint(P, set(), {"variant": variant, "model": MODEL.to_dict(), "stage": 2})


@pytest.fixture
def scene():
    return gen_scene(5)


class TestRunForward:
    def test_camera_only_without_radar(self, scene):
        scene.radar = None
        dets, maps, cmap = run_forward(ckpt_for("camera"), scene)
        assert isinstance(dets, list) and "camera" in maps and cmap is None

    @pytest.mark.parametrize("variant,missing", [("fusion", "radar"), ("radar", "radar"), ("concat", "cam_features")])
    def test_missing_modality(self, scene, variant, missing):
        setattr(scene, missing, None)
        with pytest.raises(InputError):
            run_forward(ckpt_for(variant), scene)

    def test_dumps_parse_back(self, scene, tmp_path):
        _, maps, _ = run_forward(ckpt_for("fusion"), scene, tmp_path, list(DUMPABLE) + ["contrib"])
        c, ny, nx = MODEL.channels, MODEL.grid.ny, MODEL.grid.nx
        for name in DUMPABLE:
            arr = T.load_tensor(tmp_path / f"{name}.bin")
            assert arr.shape == (c, ny, nx)
            np.testing.assert_array_equal(arr, maps[name])
        assert read_pgm(tmp_path / "contrib_C.pgm").shape == (ny, nx)

    def test_unknown_dump_for_variant(self, scene, tmp_path):
        with pytest.raises(InputError):
            run_forward(ckpt_for("radar"), scene, tmp_path, ["camera"])

    def test_zero_init_fusion_matches_concat_wiring(self, scene):
        # with zero positional encodings and zero-output attention the fused
        # input is [Fc, Fr, Fc, Fr]; folding the duplicated slices of the first
        # conv gives a concat model with identical outputs
        P = init_model(np.random.default_rng(3), MODEL, "fusion")
        P["fusion.pos_cam"] = np.zeros_like(P["fusion.pos_cam"])
        P["fusion.pos_rad"] = np.zeros_like(P["fusion.pos_rad"])
        Q = {k: v.copy() for k, v in P.items() if not k.startswith(("attn.", "fusion.pos_"))}
        w = P["fusion.cbr0.w"]
        c = MODEL.channels
        Q["fusion.cbr0.w"] = np.concatenate([w[:, :c] + w[:, 2 * c:3 * c], w[:, c:2 * c] + w[:, 3 * c:]], axis=1)
        fused = model_forward(P, MODEL, "fusion", scene.cam_features.tensor, scene.calib, scene.radar)
        concat = model_forward(Q, MODEL, "concat", scene.cam_features.tensor, scene.calib, scene.radar)
        np.testing.assert_allclose(fused.head.heatmap, concat.head.heatmap, atol=1e-12)
        np.testing.assert_allclose(fused.head.reg, concat.head.reg, atol=1e-12)
        d_f, _ = detect(P, MODEL, "fusion", scene)
        d_c, _ = detect(Q, MODEL, "concat", scene)
        assert [(d.box.cls, d.box.cx, d.box.cy) for d in d_f] == [(d.box.cls, d.box.cx, d.box.cy) for d in d_c]

    def test_checkpoint_model_requires_metadata(self):
        with pytest.raises(ValueError):
            checkpoint_model(Checkpoint({}))


@pytest.fixture(scope="module")
def frames(tmp_path_factory):
    d = tmp_path_factory.mktemp("frames")
    for s in range(4):
        write_scene(gen_scene(s), d)
    return d


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


class TestCli:
    def test_no_command_is_usage(self, capsys):
        assert run_cli() == cli.EXIT_USAGE

    def test_argparse_error_is_usage(self):
        with pytest.raises(SystemExit) as info:
            run_cli("train", "--stage", "5", "--frames", "x", "--out", "y")
        assert info.value.code == cli.EXIT_USAGE

    def test_bad_config_key_is_usage(self, capsys):
        assert run_cli("--set", "train.nope=1", "--print-config") == cli.EXIT_USAGE
        assert "config line 1" in capsys.readouterr().err

    def test_print_config(self, capsys):
        assert run_cli("--set", "train.epochs=3", "--print-config") == cli.EXIT_OK
        assert "train.epochs = 3" in capsys.readouterr().out

    def test_stage1_wrong_variant_is_usage(self, frames, tmp_path):
        assert run_cli("train", "--stage", 1, "--variant", "radar", "--frames", frames, "--out", tmp_path / "c") == 1

    def test_missing_frames_is_data_error(self, tmp_path):
        assert run_cli("train", "--stage", 1, "--frames", tmp_path, "--out", tmp_path / "c") == cli.EXIT_DATA

    def test_corrupt_checkpoint_is_data_error(self, frames, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage")
        assert run_cli("eval", "--frames", frames, "--ckpt", tmp_path / "bad.ckpt") == cli.EXIT_DATA

    def test_gen_train_forward_eval(self, frames, tmp_path, capsys):
        out = tmp_path / "gen"
        assert run_cli("gen", "--out", out, "--seeds", "0:2") == 0
        assert sorted(p.name for p in out.glob("*_calib.txt")) == ["000000_calib.txt", "000001_calib.txt"]
        cam, fus = tmp_path / "cam.ckpt", tmp_path / "fus.ckpt"
        assert run_cli("--set", "train.epochs=1", "train", "--stage", 1, "--frames", frames, "--out", cam,
                       "--loss-csv", tmp_path / "loss.csv") == 0
        assert run_cli("--set", "train.epochs=1", "train", "--stage", 2, "--frames", frames, "--camera-ckpt", cam,
                       "--out", fus) == 0
        assert Checkpoint.load(fus).frozen
        assert run_cli("forward", "--ckpt", fus, "--frames", frames, "--frame", "000001", "--out", tmp_path / "fw",
                       "--dump-bev", "fused,contrib") == 0
        assert (tmp_path / "fw" / "000001_det.txt").exists() and (tmp_path / "fw" / "000001" / "fused.bin").exists()
        assert run_cli("eval", "--frames", frames, "--pred", tmp_path / "fw", "--out", tmp_path / "r.csv") == 0
        assert run_cli("eval", "--frames", frames, "--ckpt", fus, "--n-points", "11") == 0
        assert "Car" in capsys.readouterr().out
        assert run_cli("contrib", "--ckpt", fus, "--frames", frames, "--out", tmp_path / "cb") == 0
        assert (tmp_path / "cb" / "contribution_by_class_distance.csv").exists()
        assert run_cli("contrib", "--ckpt", cam, "--frames", frames, "--out", tmp_path / "cb") == cli.EXIT_USAGE
        assert run_cli("forward", "--ckpt", fus, "--frames", frames, "--out", tmp_path / "fw",
                       "--dump-bev", "nonsense") == cli.EXIT_USAGE
        assert run_cli("forward", "--ckpt", fus, "--frames", frames, "--frame", "999", "--out", tmp_path / "fw") == 2

    def test_frozen_drift_exits_3(self, frames, tmp_path, monkeypatch):
        import hybridbev.train as train_mod

        cam = tmp_path / "cam.ckpt"
        assert run_cli("--set", "train.epochs=1", "train", "--stage", 1, "--frames", frames, "--out", cam) == 0
        real = train_mod.params_digest
        calls = []

        def drifting(params, names=None):
            calls.append(1)
            return real(params, names) + ("x" if len(calls) > 1 else "")

        monkeypatch.setattr(train_mod, "params_digest", drifting)
        code = run_cli("--set", "train.epochs=1", "train", "--stage", 2, "--frames", frames, "--camera-ckpt", cam,
                       "--out", tmp_path / "f.ckpt")
        assert code == cli.EXIT_INVARIANT

    def test_contrib_study(self, tmp_path, capsys):
        assert run_cli("contrib", "--study", "--n-scenes", 6, "--out", tmp_path) == 0
        assert "mean C" in capsys.readouterr().out

    def test_thread_flag(self, monkeypatch, capsys):
        monkeypatch.delenv(cli.THREADS_ENV, raising=False)
        assert run_cli("--threads", 3, "--print-config") == 0
        assert cli._threads() == 3
        monkeypatch.setenv(cli.THREADS_ENV, "junk")
        assert cli._threads() == 1

    def test_bench_complexity(self, capsys):
        assert run_cli("bench", "complexity") == 0
        assert capsys.readouterr().out.startswith("hw,deform_macs,dense_macs\n64,")


class TestBench:
    def test_rows_per_grid_and_count(self):
        rows = bench.bench_pooling(grids=(8, 16), point_counts=(100, 500, 1000), channels=4, runs=1)
        assert [(r.grid, r.n_points) for r in rows] == [(g, n) for g in (8, 16) for n in (100, 500, 1000)]
        assert all(r.max_abs_diff <= 1e-9 and r.speedup > 0 for r in rows)
        csv = bench.pooling_csv(rows).splitlines()
        assert csv[0].startswith("grid,n_points") and len(csv) == 7

    def test_float32(self):
        (row,) = bench.bench_pooling(grids=(8,), point_counts=(200,), channels=4, runs=1, dtype="float32")
        assert row.dtype == "float32"

    def test_equivalence_error(self, monkeypatch):
        monkeypatch.setattr(bench, "voxel_pool_efficient", lambda ff, grid, ids, workers=None: np.ones((4, 8, 8)))
        with pytest.raises(bench.EquivalenceError):
            bench.bench_pooling(grids=(8,), point_counts=(50,), channels=4, runs=1)

    def test_random_frustum_spills_outside(self, rng):
        grid = BevGrid(nx=8, ny=8)
        ff = bench.random_frustum(rng, 2000, 2, grid)
        x = ff.ego_coords[..., 0].ravel()
        assert (x < grid.x_min).any() and (x > grid.x_max).any()

    def test_r_squared(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert bench.r_squared(x, 3 * x + 1, 1) == pytest.approx(1.0)
        assert bench.r_squared(x, x ** 2, 1) < 1.0
        assert bench.growth_exponent(x, x ** 2) == pytest.approx(2.0)

    def test_complexity_fits(self):
        rep = bench.complexity_report()
        assert rep["deform_linear_r2"] >= 0.999
        assert rep["dense_quadratic_r2"] >= 0.999
        assert rep["deform_exponent"] == pytest.approx(1.0, abs=0.05)
        assert rep["dense_exponent"] > 1.8
