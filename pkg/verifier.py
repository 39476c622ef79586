import hashlib
import logging
from pathlib import Path
from typing import Iterable, Optional, Tuple

from loguru import logger

from database import (
    configure_database, count_summaries, create_tables_if_not_exist, get_metadata, reset_database, set_metadata,
)
from driver import LayerMemo, VerificationOutcome, VerifyOptions, verify_pair
from ir import AnnotationSet, Graph, parse_annotations, parse_graph
from localizer import DiscrepancyReport, build_report
from rules import ALL_FLAGS, RuleCatalog, default_catalog, load_catalog

APP_DIR = Path.home() / ".graph_equiv"


def catalog_digest(catalog: RuleCatalog) -> str:
    ids = ",".join(r.id for r in catalog)
    flags = ",".join(sorted(f.value for f in catalog.flags))
    return hashlib.sha256(f"{ids}|{flags}".encode()).hexdigest()


def load_inputs(baseline: Path, distributed: Path, annotations: Path) -> Tuple[Graph, Graph, AnnotationSet]:
    g_s = parse_graph(Path(baseline).read_text(encoding="utf-8"))
    g_m = parse_graph(Path(distributed).read_text(encoding="utf-8"))
    ann = parse_annotations(Path(annotations).read_text(encoding="utf-8"), g_s, g_m)
    logger.info("Loaded {} baseline and {} distributed nodes, {} annotations",
                len(g_s.nodes), len(g_m.nodes), len(ann.entries))
    return g_s, g_m, ann


class Verifier:
    """
    Entry point tying together the rule catalog, the layer memo and the report.

    The memo survives across runs in `app_dir/memo.db` unless `persistent_memo` is off.
    """

    def __init__(self, app_dir: Path = APP_DIR, persistent_memo: bool = True, log_to_terminal: bool = False,
                 rules: Optional[Path] = None, flags: Iterable[str] = tuple(ALL_FLAGS)):
        self._persistent = persistent_memo
        self._setup_logging_and_db(app_dir, log_to_terminal)
        self.catalog = load_catalog(rules, flags) if rules is not None else default_catalog(flags)
        self.memo = LayerMemo(persistent=persistent_memo)
        if persistent_memo:
            self._check_catalog()
        logger.info("Verifier initialized with {} rules.", len(self.catalog))

    def _setup_logging_and_db(self, app_dir: Path, log_to_terminal: bool = False):
        logging.getLogger("peewee").setLevel(logging.CRITICAL)

        if not app_dir.exists():
            app_dir.mkdir(parents=True)

        log_path = app_dir / "graph_equiv.log"
        logger.add(str(log_path), rotation="10 MB", retention="10 days")
        if not log_to_terminal:
            try:
                logger.remove(0)
            except ValueError:
                pass  # default sink already removed by an earlier instance

        if self._persistent:
            db_path = app_dir / "memo.db"
            configure_database(database=db_path)
            create_tables_if_not_exist()

    def _check_catalog(self):
        # Summaries proven under another rule set are not trusted.
        digest = catalog_digest(self.catalog)
        if get_metadata("catalog") != digest:
            if count_summaries():
                logger.warning("Rule catalog changed; dropping stored layer summaries.")
                reset_database()
            set_metadata("catalog", digest)

    def verify(self, g_s: Graph, g_m: Graph, ann: AnnotationSet,
               opts: VerifyOptions = VerifyOptions()) -> Tuple[VerificationOutcome, DiscrepancyReport]:
        memo = self.memo if opts.memo else LayerMemo()
        outcome = verify_pair(g_s, g_m, ann, self.catalog, opts, memo)
        return outcome, build_report(outcome, g_s, g_m)

    def verify_files(self, baseline: Path, distributed: Path, annotations: Path,
                     opts: VerifyOptions = VerifyOptions()) -> Tuple[VerificationOutcome, DiscrepancyReport]:
        return self.verify(*load_inputs(baseline, distributed, annotations), opts=opts)

    def stored_summaries(self) -> int:
        return count_summaries() if self._persistent else len(self.memo)

    def reset(self):
        if self._persistent:
            reset_database()
            set_metadata("catalog", catalog_digest(self.catalog))
        self.memo = LayerMemo(persistent=self._persistent)
