"""Command-line interface.

Exit codes: 0 success, 2 validation/config error, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from .corpus import (CorpusError, SlotSchema, load_corpus, save_corpus,
                     synthesize_corpus)
from .encoder import EncoderError
from .harness import (ABLATION_SETTINGS, HarnessError, TrainConfig, ablate,
                      evaluate, predict_dialogue, train)
from .model import DstModel
from .selector import SelectorError
from .update_predictor import ConfigError

VALIDATION_ERRORS = (CorpusError, HarnessError, EncoderError, SelectorError,
                     ConfigError, FileNotFoundError, KeyError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dstsel")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize a dialogue corpus")
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--max-turns", type=int, default=4)
    p.add_argument("--coref-rate", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--mode", choices=["dicos", "granularity"], default="dicos")
    p.add_argument("--k", type=int, default=None)

    p = sub.add_parser("ablate", help="perspective-masking ablation table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)

    p = sub.add_parser("predict", help="per-turn predictions for one dialogue file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dialogue", required=True, help="JSONL file; predicts each line")
    p.add_argument("--schema", required=True)

    p = sub.add_parser("inspect-graph", help="dump the reasoning graph as JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dialogue", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--turn", type=int, required=True)
    p.add_argument("--slot", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "generate-data":
        schema = SlotSchema.load(args.schema)
        corpus = synthesize_corpus(schema, args.n, args.max_turns, args.coref_rate,
                                   args.seed)
        save_corpus(corpus, args.out)
        print(f"wrote {len(corpus)} dialogues to {args.out}")
        return 0

    if args.command == "train":
        schema = SlotSchema.load(args.schema)
        corpus = load_corpus(args.data, schema)
        overrides = dict(kv.split("=", 1) for kv in args.set)
        text = open(args.config).read() if args.config else ""
        config = TrainConfig.from_flat(text, overrides)
        result = train(corpus, schema, config,
                       log=lambda e, l: print(f"epoch {e}: loss {l:.4f}"))
        result.model.save(args.out)
        with open(f"{args.out}/train_config.txt", "w") as fh:
            fh.write(config.to_flat())
        if result.diverged:
            print("training diverged; saved last good checkpoint", file=sys.stderr)
            return 3
        print(f"saved checkpoint to {args.out}")
        return 0

    schema = SlotSchema.load(args.schema)
    model = DstModel.load(args.ckpt)

    if args.command == "eval":
        corpus = load_corpus(args.data, schema)
        report = evaluate(corpus, model, k=args.k, mode=args.mode)
        print(report.to_json())
        return 0

    if args.command == "ablate":
        corpus = load_corpus(args.data, schema)
        for keep, report in ablate(corpus, model).items():
            print(f"{keep}\t{report.joint_goal_accuracy:.4f}")
        return 0

    if args.command == "predict":
        corpus = load_corpus(args.dialogue, schema)
        for dialogue in corpus:
            for line in predict_dialogue(model, dialogue, schema):
                print(json.dumps(line, sort_keys=True))
        return 0

    if args.command == "inspect-graph":
        from .harness import gold_latest_update
        from .corpus import derive_update_labels
        corpus = load_corpus(args.dialogue, schema)
        dialogue = corpus.dialogues[0]
        slot = schema.index(args.slot)
        labels = derive_update_labels(dialogue)
        t_z = gold_latest_update(labels, args.turn, schema)
        prev = dialogue.gold_states[args.turn - 2] if args.turn > 1 else schema.empty_state()
        batch = model.encoder.encode_turns(dialogue, args.turn, prev, schema)
        interactions = model.selector.cls_interactions(batch)
        graph = model.selector.build_graph(batch, interactions, schema, slot, t_z)
        nodes = []
        for t in range(graph.n_turns):
            nodes.append({"id": t, "type": "dialogue", "turn": t + 1,
                          "init_norm": float((graph.node_init.data[t] ** 2).sum() ** 0.5)})
        for z in range(graph.n_slots):
            nodes.append({"id": graph.n_turns + z, "type": "slot_value",
                          "slot": schema.slots[z].name,
                          "init_norm": float((graph.node_init.data[graph.n_turns + z] ** 2).sum() ** 0.5)})
        print(json.dumps({"target_slot": args.slot, "nodes": nodes,
                          "edges": [{"a": a, "b": b, "type": r}
                                    for a, b, r in graph.edges]}, indent=2))
        return 0

    raise HarnessError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
