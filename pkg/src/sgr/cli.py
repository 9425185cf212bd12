"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data validation, 3 provider/transport.
All file outputs land under the ``--out`` directory together with an echo
of the effective configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, apply_overrides, echo_config, load_config
from .errors import DatasetError, GraphError, ProviderError, SerializationError, TaskParseError
from .graph import LAYER_OBJECT, LAYER_ROOM, SceneGraph
from .pipeline import build_from_dataset
from .providers import MockProvider, build_provider, load_transcript
from .reasoning import run_task, score_reasoning
from .relations import PairCropStore
from .search import auc_topk, find_objects, find_rooms, retrieval_report, topk_accuracy

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROVIDER = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage is 1 here
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_graph(path: Path) -> SceneGraph:
    path = Path(path)
    if not path.is_file():
        raise SerializationError(f"graph file not found: {path}")
    return SceneGraph.deserialize(path.read_bytes())


def _effective_config(args) -> PipelineConfig:
    config = load_config(getattr(args, "config", None))
    overrides = getattr(args, "set", None) or []
    if overrides:
        config = apply_overrides(config, overrides)
    return config


# ------------------------------------------------------------------ commands


def cmd_build(args) -> int:
    config = _effective_config(args)
    out_dir = Path(args.out)
    builder = build_from_dataset(Path(args.dataset), config, out_dir=out_dir)
    echo_config(config, out_dir)
    violations = builder.graph.validate()
    if violations:
        raise GraphError("graph invariants violated:\n" + "\n".join(violations))
    print(builder.summary(), end="")
    print(builder.timer.report(), end="")
    print(f"graph written to {out_dir / 'graph.json'}")
    return EXIT_OK


def cmd_query(args) -> int:
    config = _effective_config(args)
    graph = _load_graph(args.graph)
    provider = build_provider(config.provider)
    template = config.search.label_prompt_template
    if args.object:
        threshold = args.threshold if args.threshold is not None else config.search.object_threshold
        results = find_objects(graph, args.object, provider, threshold, template=template)
        for name in args.object:
            matches = results[name]
            if not matches:
                print(f"{name}: no matches")
                continue
            for match in matches:
                node = graph.node(match.node)
                centroid = ", ".join(f"{v:.3f}" for v in node.centroid)
                print(f"{name}: node {match.node} similarity {match.similarity:.4f} centroid ({centroid})")
    if args.room:
        threshold = args.threshold if args.threshold is not None else config.search.room_threshold
        matches = find_rooms(graph, args.room, provider, threshold, template=template)
        if not matches:
            print("rooms: no matches")
        for match in matches:
            node = graph.node(match.node)
            centroid = ", ".join(f"{v:.3f}" for v in node.centroid)
            print(f"room {match.node} mean similarity {match.similarity:.4f} centroid ({centroid})")
    return EXIT_OK


def cmd_reason(args) -> int:
    config = _effective_config(args)
    graph = _load_graph(args.graph)
    palette_doc = json.loads(Path(args.palette).read_text(encoding="utf-8"))
    palette = {int(k): tuple(v) for k, v in palette_doc["label_palette"].items()}
    color_labels = {int(k): str(v) for k, v in palette_doc.get("label_names", {}).items()}
    provider = build_provider(config.provider, palette=palette, color_labels=color_labels)
    crop_store = PairCropStore.load(Path(args.graph).parent / "pair_crops")
    report = run_task(
        args.task,
        graph,
        provider,
        palette=palette,
        object_threshold=config.search.object_threshold,
        room_threshold=config.search.room_threshold,
        room_scope=config.reasoning.room_scope,
        max_retries=config.reasoning.max_retries,
        max_pairs_per_subtask=config.reasoning.max_pairs_per_subtask,
        template=config.search.label_prompt_template,
        crop_store=crop_store,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_config(config, out_dir)
    report_path = out_dir / "task_report.json"
    report_path.write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    executed = sum(1 for v in report.verdicts if v.execute)
    print(f"task: {args.task}")
    print(f"objects bound: " + ", ".join(
        f"{name}={len(matches)}" for name, matches in sorted(report.grounded.object_bindings.items())
    ))
    print(f"subtask pair bindings: {len(report.grounded.subtask_bindings)} "
          f"(missing: {sum(1 for b in report.grounded.subtask_bindings if b.missing)})")
    for verdict in report.verdicts:
        state = "EXECUTE" if verdict.execute else "SKIP"
        if verdict.unevaluated_reason:
            state = f"UNEVALUATED ({verdict.unevaluated_reason})"
        print(f"subtask {verdict.subtask_index} pair {verdict.pair}: {state}")
    print(f"verdicts: {executed} execute / {len(report.verdicts)} evaluated")
    print(f"report written to {report_path}")
    return EXIT_OK


def _resolve_fixture_feature(entry, provider):
    import numpy as np

    if isinstance(entry, dict):
        anchor = provider.embed_text(entry["anchor"])
        epsilon = float(entry.get("epsilon", 0.0))
        if epsilon == 0.0:
            return anchor
        from .providers import _hash_unit_vector

        noise = _hash_unit_vector(
            b"fixture\x00" + str(entry.get("tag", "")).encode(), provider.seed, provider.embedding_dim
        )
        vec = anchor + epsilon * noise
        return vec / np.linalg.norm(vec)
    return np.asarray(entry, dtype=np.float64)


def cmd_eval(args) -> int:
    config = _effective_config(args)
    if args.retrieval:
        doc = json.loads(Path(args.retrieval).read_text(encoding="utf-8"))
        provider = MockProvider(
            seed=int(doc.get("seed", config.seed)),
            embedding_dim=int(doc["embedding_dim"]),
            relation_dim=config.provider.relation_dim,
        )
        features = [_resolve_fixture_feature(o["feature"], provider) for o in doc["objects"]]
        labels = [o["true_label"] for o in doc["objects"]]
        ks = [int(k) for k in doc.get("ks", [5, 10, 25, 100, 250, 500])]
        ks = [k for k in ks if k <= len(doc["vocabulary"])]
        accuracies = topk_accuracy(
            features, labels, doc["vocabulary"], provider, ks,
            template=config.search.label_prompt_template,
        )
        auc = auc_topk(accuracies, max(ks))
        print(retrieval_report(accuracies, auc, len(features)), end="")
        return EXIT_OK
    doc = json.loads(Path(args.reasoning).read_text(encoding="utf-8"))
    fixture_dir = Path(args.reasoning).parent
    graph = _load_graph(fixture_dir / doc["graph"])
    palette = {int(k): tuple(v) for k, v in doc["label_palette"].items()}
    color_labels = {int(k): str(v) for k, v in doc.get("label_names", {}).items()}
    reports = []
    for task_doc in doc["tasks"]:
        provider = MockProvider(
            seed=int(doc.get("seed", config.seed)),
            embedding_dim=int(doc["embedding_dim"]),
            relation_dim=int(doc.get("relation_dim", config.provider.relation_dim)),
            palette=palette,
            color_labels=color_labels,
            chat_script=load_transcript(task_doc.get("chat_transcript")),
            describe_script=load_transcript(task_doc.get("describe_transcript")),
        )
        reports.append(
            run_task(
                task_doc["task"],
                graph,
                provider,
                palette=palette,
                object_threshold=float(doc.get("object_threshold", config.search.object_threshold)),
                room_threshold=config.search.room_threshold,
                max_retries=config.reasoning.max_retries,
                max_pairs_per_subtask=config.reasoning.max_pairs_per_subtask,
            )
        )
    scores = score_reasoning(reports, doc["ground_truth"])
    print("reasoning evaluation")
    print("--------------------")
    print(f"SR%: {scores['sr_percent']:.2f}")
    print(f"FP: {scores['fp']}")
    print(f"positives: {scores['correct']}/{scores['positives']}")
    return EXIT_OK


def cmd_export(args) -> int:
    graph = _load_graph(args.graph)
    dot = graph.export_dot()
    out_path = Path(args.dot)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(dot, encoding="utf-8")
    print(f"DOT written to {out_path}")
    return EXIT_OK


# --------------------------------------------------------------------- wiring


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="build a scene graph from a replay dataset")
    p_build.add_argument("dataset", type=Path, help="dataset directory with manifest.json")
    p_build.add_argument("--config", type=Path, default=None)
    p_build.add_argument("--out", type=Path, required=True)
    p_build.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p_build.set_defaults(func=cmd_build)

    p_query = sub.add_parser("query", help="similarity search over a built graph")
    p_query.add_argument("graph", type=Path, help="path to graph.json")
    p_query.add_argument("--config", type=Path, default=None)
    p_query.add_argument("--object", nargs="+", default=None, help="object names to search")
    p_query.add_argument("--room", nargs="+", default=None, help="room queries to search")
    p_query.add_argument("--threshold", type=float, default=None)
    p_query.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_query.set_defaults(func=cmd_query)

    p_reason = sub.add_parser("reason", help="ground and evaluate a task against a graph")
    p_reason.add_argument("graph", type=Path)
    p_reason.add_argument("--task", required=True)
    p_reason.add_argument("--palette", type=Path, required=True,
                          help="JSON with label_palette (and label_names), e.g. the dataset manifest")
    p_reason.add_argument("--config", type=Path, default=None)
    p_reason.add_argument("--out", type=Path, required=True)
    p_reason.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_reason.set_defaults(func=cmd_reason)

    p_eval = sub.add_parser("eval", help="run a retrieval or reasoning evaluation fixture")
    group = p_eval.add_mutually_exclusive_group(required=True)
    group.add_argument("--retrieval", type=Path, default=None)
    group.add_argument("--reasoning", type=Path, default=None)
    p_eval.add_argument("--config", type=Path, default=None)
    p_eval.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_eval.set_defaults(func=cmd_eval)

    p_export = sub.add_parser("export", help="export a graph to Graphviz DOT")
    p_export.add_argument("graph", type=Path)
    p_export.add_argument("--dot", type=Path, required=True)
    p_export.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command == "query" and not args.object and not args.room:
        print("query needs --object and/or --room", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (DatasetError, SerializationError, GraphError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TaskParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for i, raw in enumerate(exc.raw_responses):
            print(f"  response {i}: {raw[:120]!r}", file=sys.stderr)
        return EXIT_PROVIDER
    except ProviderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    raise SystemExit(main())
