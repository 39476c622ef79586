import typer
from pathlib import Path
from typing import List, Optional

from driver import Verdict, VerifyOptions
from egraph import Budget
from harness import (
    BugInjection, ModelKind, ModelSpec, ParallelPlan, Strategy, Variant, correct_cases, generate_corpus, inject,
    write_corpus,
)
from ir import parse_graph, serialize_graph
from localizer import render_report
from rules import ALL_FLAGS, default_catalog, explain_rule
from verifier import APP_DIR, Verifier

app = typer.Typer(help="Check that a distributed tensor graph computes the same outputs as its baseline.")

EXIT_CODES = {Verdict.VERIFIED: 0, Verdict.UNVERIFIED: 1, Verdict.INCONCLUSIVE: 2}
EXIT_ERROR = 3
DEFAULT_FLAGS = ",".join(sorted(f.value for f in ALL_FLAGS))


def fail(e: Exception):
    typer.echo(f"Error: {e}", err=True)
    raise typer.Exit(EXIT_ERROR)


def parse_flags(flags: str) -> List[str]:
    return [f.strip() for f in flags.split(",") if f.strip()]


@app.command()
def verify(
    baseline: Path = typer.Argument(..., help="Baseline graph JSON."),
    distributed: Path = typer.Argument(..., help="Distributed graph JSON."),
    annotations: Path = typer.Argument(..., help="Input relation annotations JSON."),
    jobs: int = typer.Option(1, "--jobs", "-j", help="Worker threads for rule matching."),
    no_memo: bool = typer.Option(False, "--no-memo", help="Rewrite every layer even when an identical one was seen."),
    no_parallel: bool = typer.Option(False, "--no-parallel", help="Match rules sequentially."),
    no_partition: bool = typer.Option(False, "--no-partition", help="Rewrite the whole graph as one layer."),
    rules: Optional[Path] = typer.Option(None, "--rules", help="File listing the rule ids to enable."),
    flags: str = typer.Option(DEFAULT_FLAGS, "--flags", help="Parallelism rule families: tp, sp, ep."),
    dump_facts: Optional[Path] = typer.Option(None, "--dump-facts", help="Write every derived fact here."),
    report: Optional[Path] = typer.Option(None, "--report", help="Also write the report to this file."),
    keep_going: bool = typer.Option(False, "--keep-going", help="Continue past a failed layer."),
    fmt: str = typer.Option("text", "--format", help="Report format: text or json."),
    max_iterations: int = typer.Option(Budget().max_iterations, "--max-iterations"),
    max_facts: int = typer.Option(Budget().max_facts, "--max-facts"),
    memo_db: bool = typer.Option(True, "--memo-db/--no-memo-db", help="Keep layer summaries across runs."),
    app_dir: Path = typer.Option(APP_DIR, "--app-dir", help="Directory for the log file and memo database."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log to the terminal as well."),
):
    """Verify a baseline/distributed graph pair."""
    try:
        if fmt not in ("text", "json"):
            raise ValueError(f"unknown report format {fmt!r}")
        verifier = Verifier(app_dir, persistent_memo=memo_db and not no_memo, log_to_terminal=verbose,
                            rules=rules, flags=parse_flags(flags))
        opts = VerifyOptions(jobs=jobs, parallel=not no_parallel, memo=not no_memo, keep_going=keep_going,
                             partition=not no_partition, budget=Budget(max_iterations, max_facts))
        outcome, result = verifier.verify_files(baseline, distributed, annotations, opts)
        text = render_report(result, fmt)
        if report is not None:
            report.write_text(text, encoding="utf-8")
        if dump_facts is not None:
            dump_facts.write_text("\n".join(outcome.dump_facts()) + "\n", encoding="utf-8")
    except Exception as e:
        fail(e)
    typer.echo(text, nl=False)
    raise typer.Exit(EXIT_CODES[outcome.verdict])


@app.command()
def gen(
    out_dir: Path = typer.Argument(..., help="Directory to write the corpus into."),
    model: Optional[ModelKind] = typer.Option(None, "--model", help="Write a single correct pair of this model."),
    strategy: Optional[Strategy] = typer.Option(None, "--strategy"),
    degree: int = typer.Option(2, "--degree"),
    layers: int = typer.Option(1, "--layers"),
    hidden: int = typer.Option(8, "--hidden"),
    heads: int = typer.Option(2, "--heads"),
    seqlen: int = typer.Option(4, "--seqlen"),
    experts: int = typer.Option(4, "--experts"),
    rolled: bool = typer.Option(False, "--rolled", help="Reduce experts with sum_reduce instead of slices."),
):
    """Generate correct pairs and injected-bug pairs with a corpus.manifest."""
    try:
        if model is None:
            cases = correct_cases() + generate_corpus()
        else:
            spec = ModelSpec(model, layers, hidden, heads, seqlen, experts=experts)
            plan = ParallelPlan(strategy or {ModelKind.MOE: Strategy.EP}.get(model, Strategy.TP), degree,
                                unrolled=not rolled)
            cases = correct_cases([(spec, plan)])
        manifest = write_corpus(cases, out_dir)
    except Exception as e:
        fail(e)
    typer.echo(f"Wrote {len(cases)} cases; manifest at {manifest}")


@app.command(name="inject")
def inject_bug(
    distributed: Path = typer.Argument(..., help="Distributed graph JSON to mutate."),
    variant: Variant = typer.Argument(..., help="Kind of bug."),
    site: str = typer.Argument(..., help="Node id to mutate."),
    out: Path = typer.Option(..., "--out", "-o", help="Where to write the mutated graph."),
):
    """Inject one semantic bug into a distributed graph."""
    try:
        g = parse_graph(distributed.read_text(encoding="utf-8"))
        bug = BugInjection(variant, site)
        out.write_text(serialize_graph(inject(g, bug)), encoding="utf-8")
    except Exception as e:
        fail(e)
    typer.echo(f"Injected category {bug.category} bug ({bug.description}) at {site}")


@app.command(name="explain-rules")
def explain_rules(
    rule_id: Optional[str] = typer.Argument(None, help="Explain a single rule."),
    flags: str = typer.Option(DEFAULT_FLAGS, "--flags"),
):
    """List the enabled rules or explain one of them."""
    try:
        catalog = default_catalog(parse_flags(flags))
        ids = [rule_id] if rule_id else catalog.ids
        text = "\n".join(explain_rule(i, catalog) for i in ids)
    except Exception as e:
        fail(e)
    typer.echo(text)


if __name__ == "__main__":
    app()
