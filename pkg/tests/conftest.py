from __future__ import annotations

import time

import pytest

from spgkit.cli_report import RunConfig, run_corpus

from corpus.generate import write_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    dest = tmp_path_factory.mktemp("corpus")
    write_corpus(dest)
    return dest


def corpus_config(corpus_dir, **kw) -> RunConfig:
    return RunConfig(corpus_manifest_path=str(corpus_dir / "manifest.jsonl"),
                     baseline_path=str(corpus_dir / "baseline.jsonl"), **kw)


@pytest.fixture(scope="session")
def timed_corpus_run(corpus_dir):
    """(CorpusRun, seconds) for the fixture corpus."""
    t0 = time.perf_counter()
    run = run_corpus(corpus_config(corpus_dir))
    return run, time.perf_counter() - t0


@pytest.fixture(scope="session")
def corpus_run(timed_corpus_run):
    return timed_corpus_run[0]
