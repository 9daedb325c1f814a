"""Session-scoped toy pipeline shared by integration and acceptance tests.

The pipeline runs once through the real CLI entry point; a second identical
run backs the end-to-end reproducibility comparison. Both are expensive, so
every test that needs a trained model leans on these fixtures.
"""

import pytest

from distillvc import cli

TOY_SEED = 1234


def run_cli(argv) -> None:
    argv = [str(a) for a in argv]
    rc = cli.main(argv)
    if rc != 0:
        raise AssertionError(f"cli {' '.join(argv)} exited {rc}")


def build_pipeline(root, seed=TOY_SEED):
    corpus, features = root / "corpus", root / "features"
    run_cli(["gen-corpus", "--out", corpus, "--seed", seed])
    run_cli(["extract-features", "--corpus", corpus, "--out", features, "--seed", seed])
    run_cli(["train-teacher", "--corpus", corpus, "--features", features, "--out", root / "teacher", "--seed", seed])
    run_cli(["train-vocoder", "--corpus", corpus, "--features", features, "--out", root / "vocoder", "--seed", seed])
    run_cli([
        "distill", "--teacher", root / "teacher" / "teacher.ckpt", "--vocoder", root / "vocoder" / "vocoder.ckpt",
        "--corpus", corpus, "--features", features, "--out", root / "student", "--seed", seed,
    ])
    run_cli([
        "evaluate", "--model", root / "student" / "student.ckpt", "--corpus", corpus, "--features", features,
        "--out", root / "eval_student", "--k", 1, "--seed", seed,
    ])
    run_cli([
        "evaluate", "--model", root / "teacher" / "teacher.ckpt", "--corpus", corpus, "--features", features,
        "--out", root / "eval_teacher_k1", "--k", 1, "--no-cost", "--seed", seed,
    ])
    # the initial-state sweep probes the pretrained multistep model: it is the
    # analysis that motivates the one-step operating point before distillation
    run_cli([
        "sweep-init", "--model", root / "teacher" / "teacher.ckpt", "--corpus", corpus, "--features", features,
        "--out", root / "sweep", "--seed", seed,
    ])
    return root


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return build_pipeline(tmp_path_factory.mktemp("pipeline"))


@pytest.fixture(scope="session")
def pipeline_rerun(pipeline, tmp_path_factory):
    # full second run at the same seed; pipeline first so failures there surface once
    return build_pipeline(tmp_path_factory.mktemp("pipeline_rerun"))
