"""CLI and pipeline surface: subcommands, config handling, exit codes,
artifact round trips."""

import os

import numpy as np
import pytest

from convdict import config as CFG
from convdict import data as D
from convdict import inference as I
from convdict.classifier import read_report_csv
from convdict.cli import main
from convdict.synth import write_digit_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    tr_i = str(root / "train_images.idx")
    tr_l = str(root / "train_labels.idx")
    te_i = str(root / "test_images.idx")
    te_l = str(root / "test_labels.idx")
    write_digit_corpus(tr_i, tr_l, 60, seed=100, rows=16, cols=16)
    write_digit_corpus(te_i, te_l, 30, seed=101, rows=16, cols=16)
    return {"train_images": tr_i, "train_labels": tr_l,
            "test_images": te_i, "test_labels": te_l}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus):
    out = str(tmp_path_factory.mktemp("run"))
    cfg_path = os.path.join(out, "run.cfg")
    with open(cfg_path, "w") as f:
        f.write(f"""# tiny end-to-end configuration
train_images = {corpus['train_images']}
train_labels = {corpus['train_labels']}
test_images = {corpus['test_images']}
test_labels = {corpus['test_labels']}
layers = 3:5x5:p2x2,4:3x3
out_dir = {out}
seed = 9
pretrain_burn = 5
pretrain_collect = 3
refine_burn = 4
refine_collect = 3
test_burn = 6
test_collect = 3
a0 = 0.2
b0 = 0.8
""")
    return out, cfg_path


class TestConfig:
    def test_layer_parsing(self):
        specs = CFG.parse_layers("32:8x8:p3x3, 160:6x6")
        assert specs[0].atoms == 32 and specs[0].pool.nx == 3
        assert specs[1].pool is None
        assert CFG.layers_to_text(specs) == "32:8x8:p3x3,160:6x6"

    def test_bad_layer_rejected(self):
        with pytest.raises(CFG.UsageError):
            CFG.parse_layers("32x8")

    def test_unknown_key_rejected(self):
        with pytest.raises(CFG.UsageError):
            CFG.config_from_items({"no_such_key": "1"})

    def test_flags_win_over_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("seed = 4\nout_dir = a\n")
        cfg = CFG.load_config(str(p), {"seed": "7"})
        assert cfg.seed == 7 and cfg.out_dir == "a"

    def test_prune_broadcast(self):
        cfg = CFG.config_from_items({"layers": "2:3x3:p2x2,3:2x2", "prune": "0.01"})
        assert cfg.prune_thresholds() == [0.01, 0.01]


class TestExitCodes:
    def test_usage_error_is_1(self, capsys):
        assert main(["no-such-command"]) == 1
        assert main([]) == 1
        assert main(["pretrain", "badarg"]) == 1

    def test_data_error_is_2(self, tmp_path, capsys):
        out = str(tmp_path / "o")
        rc = main(["pretrain", f"--out_dir={out}",
                   "--train_images=/nonexistent.idx", "--layers=2:3x3"])
        assert rc == 2

    def test_numerical_error_is_3(self, tmp_path, corpus, capsys):
        bad = str(tmp_path / "bad.idx")
        # NaN cannot be encoded in IDX bytes; corrupt via a feature file stage
        # instead: a pretrain run on constant-zero images stays finite, so
        # exercise the mapping through the pipeline guard directly.
        from convdict.pipeline import NumericalError, _check_finite
        with pytest.raises(NumericalError):
            _check_finite("x", np.array([np.nan]))


class TestPipelineEndToEnd:
    def test_full_pipeline_runs(self, run_dir, capsys):
        out, cfg_path = run_dir
        rc = main(["pipeline", f"--config={cfg_path}"])
        assert rc == 0
        printed = capsys.readouterr().out
        assert "test_error=" in printed
        for artifact in ("pretrained_model", "refined_model", "collapsed",
                         "features_train.feat", "features_test.feat",
                         "classifier", "classifier_report.csv", "summary.txt"):
            assert os.path.exists(os.path.join(out, artifact)), artifact

    def test_report_parses(self, run_dir):
        out, _ = run_dir
        idx, true, pred, score = read_report_csv(
            os.path.join(out, "classifier_report.csv"))
        assert len(idx) == 30
        assert all(t is not None for t in true)

    def test_classify_only_reuses_features(self, run_dir, capsys):
        out, cfg_path = run_dir
        feat_mtime = os.path.getmtime(os.path.join(out, "features_test.feat"))
        rc = main(["classify", f"--config={cfg_path}"])
        assert rc == 0
        assert os.path.getmtime(os.path.join(out, "features_test.feat")) == feat_mtime

    def test_resume_skips_completed_stages(self, run_dir, capsys):
        out, cfg_path = run_dir
        model_mtime = os.path.getmtime(
            os.path.join(out, "pretrained_model", "header.txt"))
        rc = main(["pipeline", f"--config={cfg_path}"])
        assert rc == 0
        assert os.path.getmtime(
            os.path.join(out, "pretrained_model", "header.txt")) == model_mtime

    def test_features_roundtrip(self, run_dir):
        out, _ = run_dir
        fs = I.load_features(os.path.join(out, "features_train.feat"))
        assert fs.count == 60
        assert fs.labels is not None

    def test_visualize_and_generate(self, run_dir, capsys):
        out, cfg_path = run_dir
        assert main(["visualize", f"--config={cfg_path}", "--threshold=0.8"]) == 0
        sheet = os.path.join(out, "atoms", "sheet.pgm")
        assert os.path.exists(sheet)
        img = D.read_pgm(sheet)
        assert img.ndim == 2
        assert main(["generate", f"--config={cfg_path}", "--count=4",
                     "--gen-seed=3"]) == 0
        g = D.read_pgm(os.path.join(out, "generated_003.pgm"))
        assert g.shape == (16, 16)

    def test_interpolate_command(self, run_dir, capsys):
        out, cfg_path = run_dir
        rc = main(["interpolate", f"--config={cfg_path}", "--count=2",
                   "--mask=bottom", "--layers-to-use=1"])
        assert rc == 0
        assert "missing_region_mse=" in capsys.readouterr().out
        assert os.path.exists(os.path.join(out, "interp_001.pgm"))

    def test_emitted_pgm_reparses(self, run_dir):
        out, _ = run_dir
        img = D.read_pgm(os.path.join(out, "interp_000.pgm"))
        assert img.shape == (16, 16)
        assert np.all((0 <= img) & (img <= 1))


class TestPerClassPipeline:
    def test_two_class_concatenation(self, tmp_path, capsys):
        root = tmp_path
        tr_i, tr_l = str(root / "ti.idx"), str(root / "tl.idx")
        te_i, te_l = str(root / "si.idx"), str(root / "sl.idx")
        rng = np.random.default_rng(5)
        # two easily separable synthetic classes
        imgs = np.zeros((24, 12, 12))
        labels = np.arange(24) % 2
        imgs[labels == 0, 2:6, 2:10] = 0.9
        imgs[labels == 1, 2:10, 5:8] = 0.9
        imgs += 0.05 * rng.uniform(size=imgs.shape)
        D.write_idx_images(tr_i, imgs)
        D.write_idx_labels(tr_l, labels)
        D.write_idx_images(te_i, imgs[:8])
        D.write_idx_labels(te_l, labels[:8])
        out = str(root / "run")
        rc = main(["pipeline", f"--out_dir={out}", f"--train_images={tr_i}",
                   f"--train_labels={tr_l}", f"--test_images={te_i}",
                   f"--test_labels={te_l}", "--layers=2:3x3:p2x2,2:2x2",
                   "--per_class=true", "--a0=0.2", "--b0=0.8",
                   "--pretrain_burn=4", "--pretrain_collect=2",
                   "--refine_burn=3", "--refine_collect=2",
                   "--test_burn=4", "--test_collect=2", "--seed=2"])
        assert rc == 0
        from convdict.collapse import load_collapsed
        cat = load_collapsed(os.path.join(out, "collapsed"))
        assert cat.atoms == 4  # two atoms per class, concatenated
