import pytest

from driver import Verdict, VerifyOptions
from ir import serialize_annotations, serialize_graph
from verifier import Verifier, catalog_digest, load_inputs
from rules import default_catalog


@pytest.fixture
def pair_files(tmp_path, tp_matmul):
    g_s, g_m, ann = tp_matmul
    paths = (tmp_path / "baseline.json", tmp_path / "distributed.json", tmp_path / "annotations.json")
    for path, text in zip(paths, (serialize_graph(g_s), serialize_graph(g_m), serialize_annotations(ann))):
        path.write_text(text)
    return paths


def test_load_inputs(pair_files, tp_matmul):
    g_s, g_m, ann = load_inputs(*pair_files)
    assert set(g_s.nodes) == set(tp_matmul[0].nodes)
    assert ann == tp_matmul[2]


def test_verify_files_creates_log_and_memo(tmp_path, pair_files):
    app_dir = tmp_path / "app"
    verifier = Verifier(app_dir)
    outcome, report = verifier.verify_files(*pair_files)
    assert outcome.verdict == Verdict.VERIFIED
    assert report.frontier == []
    assert (app_dir / "graph_equiv.log").exists()
    assert (app_dir / "memo.db").exists()
    assert verifier.stored_summaries() == 1


def test_memo_persists_across_instances(tmp_path, pair_files):
    app_dir = tmp_path / "app"
    Verifier(app_dir).verify_files(*pair_files)
    outcome, _ = Verifier(app_dir).verify_files(*pair_files)
    assert outcome.verdict == Verdict.VERIFIED
    assert outcome.stats.memo_hits == 1


def test_no_memo_option_skips_store(tmp_path, pair_files):
    verifier = Verifier(tmp_path / "app")
    outcome, _ = verifier.verify_files(*pair_files, opts=VerifyOptions(memo=False))
    assert outcome.stats.memo_hits == 0
    assert verifier.stored_summaries() == 0


def test_catalog_change_drops_summaries(tmp_path, pair_files):
    app_dir = tmp_path / "app"
    Verifier(app_dir).verify_files(*pair_files)
    assert Verifier(app_dir).stored_summaries() == 1
    assert Verifier(app_dir, flags=["tp"]).stored_summaries() == 0


def test_reset(tmp_path, pair_files):
    verifier = Verifier(tmp_path / "app")
    verifier.verify_files(*pair_files)
    verifier.reset()
    assert verifier.stored_summaries() == 0
    assert len(verifier.memo) == 0


def test_in_memory_verifier(tmp_path, tp_matmul):
    verifier = Verifier(tmp_path / "app", persistent_memo=False)
    outcome, _ = verifier.verify(*tp_matmul)
    assert outcome.verdict == Verdict.VERIFIED
    assert verifier.stored_summaries() == 1
    assert not (tmp_path / "app" / "memo.db").exists()


def test_catalog_digest_depends_on_rules_and_flags():
    assert catalog_digest(default_catalog()) == catalog_digest(default_catalog())
    assert catalog_digest(default_catalog()) != catalog_digest(default_catalog(["tp"]))
