"""Command-line pipeline: curate, build-vocab, train, generate, chat, eval.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 service error. Every run logs a fingerprint over its effective
configuration, and output artifacts embed it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import curation, evaluation, instruction
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import load_corpus
from .errors import ServiceUnavailableError, XrayGPTError
from .model import AlignmentLayer, AlignmentModel, FeatureTable, ModelConfig, encode_image
from .service import HttpTextClient, MockTextClient
from .trainer import StageConfig, train_stage, write_loss_trace

logger = logging.getLogger("xraygpt")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SERVICE = 3

DATA_DIR = Path(__file__).parent / "data"
DEMO_REPORTS = DATA_DIR / "demo_reports.jsonl"
DEMO_FEATURES = DATA_DIR / "demo_features.jsonl"
DEFAULT_INSTRUCTIONS_FILE = DATA_DIR / "instructions.txt"


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the pipeline reserves 2 for data
    # problems, so usage maps to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_config_file(path: str | None) -> dict[str, str]:
    """Flat key=value file; '#' comments and blank lines ignored."""
    if not path:
        return {}
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise XrayGPTError(f"bad config line {line!r} (expected key=value)")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def run_fingerprint(args: argparse.Namespace) -> str:
    effective = {k: repr(v) for k, v in sorted(vars(args).items()) if k != "func"}
    payload = json.dumps(effective, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-raw", type=int, default=64)
    p.add_argument("--v-dim", type=int, default=512)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--max-len", type=int, default=128)
    p.add_argument(
        "--decoder", choices=("linear_tier0", "transformer_tier1"), default="transformer_tier1"
    )
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--grid-size", type=int, default=8)
    p.add_argument("--num-img-tokens", type=int, default=1)
    p.add_argument("--projection-seed", type=int, default=1)
    p.add_argument("--decoder-seed", type=int, default=2)
    p.add_argument("--alignment-seed", type=int, default=3)


def _model_config(args: argparse.Namespace, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        d_raw=args.d_raw,
        v_dim=args.v_dim,
        d_model=args.d_model,
        vocab_size=vocab_size,
        max_len=args.max_len,
        decoder_kind=args.decoder,
        n_layers=args.layers,
        n_heads=args.heads,
        grid_size=args.grid_size,
        num_img_tokens=args.num_img_tokens,
        projection_seed=args.projection_seed,
        decoder_seed=args.decoder_seed,
        alignment_seed=args.alignment_seed,
    )


def _load_instruction_set(path: str | None) -> instruction.InstructionSet:
    return instruction.load_instruction_set(path or DEFAULT_INSTRUCTIONS_FILE)


def _feature_vec(ref: str, config: ModelConfig, table: FeatureTable | None, image_root):
    return encode_image(ref, config, features=table, image_root=image_root).vector


# -- subcommands ------------------------------------------------------------


def cmd_curate(args) -> int:
    cfg = curation.CurationConfig(
        min_findings_words=args.min_findings_words,
        min_impression_words=args.min_impression_words,
        use_rewrite_service=bool(args.endpoint),
    )
    corpus = load_corpus(args.inp, source_label=args.source_label)
    client = HttpTextClient(args.endpoint) if args.endpoint else None
    records, stats = curation.curate_corpus(corpus, cfg, client=client)
    curation.save_curated(records, args.out, fingerprint=run_fingerprint(args))
    print(f"total_in={stats.total_in} accepted={stats.accepted}")
    for reason, count in sorted(stats.rejected_by_reason.items()):
        print(f"rejected[{reason}]={count}")
    if stats.rewrite_fallbacks:
        print(f"rewrite_fallbacks={stats.rewrite_fallbacks}")
    assert stats.balanced
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    records = curation.load_curated(args.curated)
    iset = _load_instruction_set(args.instructions)
    vocab = instruction.build_vocab(records, iset.instructions, max_size=args.max_size)
    vocab.save(args.out)
    print(f"vocab_size={len(vocab)}")
    return EXIT_OK


def _build_examples(args, vocab, config):
    records = curation.load_curated(args.curated)
    if not records:
        raise XrayGPTError("curated file holds no records")
    iset = _load_instruction_set(args.instructions)
    table = FeatureTable.load(args.features) if args.features else None
    rng = np.random.default_rng([args.seed, 1])
    examples, vecs = [], []
    for rec in records:
        instr = instruction.sample_instruction(iset, rng)
        examples.append(
            instruction.build_training_example(rec, instr, vocab, config.num_img_tokens)
        )
        vecs.append(_feature_vec(rec.image_refs[0], config, table, args.image_root))
    return examples, vecs


def cmd_train(args) -> int:
    if args.stage == "2" and not args.init_checkpoint:
        print(
            "train: error: stage 2 must start from a stage-1 checkpoint "
            "(pass --init-checkpoint)",
            file=sys.stderr,
        )
        return EXIT_USAGE
    vocab = instruction.Vocabulary.load(args.vocab)
    config = _model_config(args, len(vocab))
    model = AlignmentModel(config)
    start = load_checkpoint(args.init_checkpoint) if args.init_checkpoint else None
    stage_name = "one" if args.stage == "1" else "two"
    overrides = {"seed": args.seed, "learning_rate": args.lr, "optimizer": args.optimizer}
    if args.total_steps is not None:
        overrides["total_steps"] = args.total_steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    stage_cfg = StageConfig.for_stage(stage_name, **overrides)
    examples, vecs = _build_examples(args, vocab, config)
    ckpt, losses = train_stage(stage_cfg, model, examples, vecs, start=start)
    save_checkpoint(ckpt, args.out_checkpoint)
    if args.loss_trace:
        write_loss_trace(
            args.loss_trace,
            losses,
            start_step=ckpt.step - len(losses),
            fingerprint=run_fingerprint(args),
        )
    print(f"stage={stage_name} steps={len(losses)} final_loss={losses[-1]:.6f}")
    return EXIT_OK


def _model_from_checkpoint(args, vocab):
    config = _model_config(args, len(vocab))
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.fingerprint != config.fingerprint():
        raise XrayGPTError(
            "checkpoint was produced under a different configuration; "
            "pass the same model flags used at training time"
        )
    layer = AlignmentLayer(config.v_dim, config.d_model)
    layer.weight = ckpt.weight.copy()
    layer.bias = ckpt.bias.copy()
    return AlignmentModel(config, alignment=layer), config


def cmd_generate(args) -> int:
    vocab = instruction.Vocabulary.load(args.vocab)
    model, config = _model_from_checkpoint(args, vocab)
    table = FeatureTable.load(args.features) if args.features else None
    vec = _feature_vec(args.image, config, table, args.image_root)
    instr = args.instruction or _load_instruction_set(args.instructions).instructions[0]
    prompt = instruction.build_prompt(instr)
    text = model.generate(vec, prompt, vocab, max_new_tokens=args.max_new_tokens)
    print(text)
    return EXIT_OK


def cmd_chat(args) -> int:
    vocab = instruction.Vocabulary.load(args.vocab)
    model, config = _model_from_checkpoint(args, vocab)
    table = FeatureTable.load(args.features) if args.features else None
    active_vec = None
    if args.image:
        active_vec = _feature_vec(args.image, config, table, args.image_root)
    history = ""
    print("xraygpt chat: /image <ref> switches the X-ray, /quit exits", flush=True)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if line == "/quit":
            break
        if line.startswith("/image"):
            ref = line[len("/image") :].strip()
            try:
                active_vec = _feature_vec(ref, config, table, args.image_root)
                print(f"[active image: {ref}]", flush=True)
            except XrayGPTError as exc:
                print(f"[error: {exc}]", flush=True)
            continue
        if active_vec is None:
            print("[error: no active image; use /image <ref>]", flush=True)
            continue
        turn = instruction.build_prompt(line, with_system=not history)
        prompt = (history + " " + turn).strip()
        reply = model.generate(active_vec, prompt, vocab, max_new_tokens=args.max_new_tokens)
        print(reply, flush=True)
        history = (prompt + " " + reply).strip()
    return EXIT_OK


def cmd_eval_rouge(args) -> int:
    triples = evaluation.load_eval_pairs(args.pairs)
    if not triples:
        raise XrayGPTError("no candidate/reference pairs to score")
    rows = [(pid, evaluation.score_pair(cand, ref)) for pid, cand, ref in triples]
    agg = evaluation.corpus_rouge([(c, r) for _, c, r in triples])
    print(evaluation.format_rouge_table([(args.label, agg)]))
    if args.out:
        evaluation.write_scores(args.out, rows, fingerprint=run_fingerprint(args))
    return EXIT_OK


def cmd_eval_judge(args) -> int:
    records = []
    with Path(args.pairs).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "_meta" in obj:
                continue
            records.append((obj["id"], obj["reference"], obj["response_a"], obj["response_b"]))
    if not records:
        raise XrayGPTError("no judge records")
    if args.endpoint:
        client = HttpTextClient(args.endpoint)
    else:
        # Offline fallback: higher unigram-F1 response wins.
        def _policy(system_text, user_text):
            ref = user_text.split("Reference:\n", 1)[1].split("\n\nResponse A:\n", 1)[0]
            a = user_text.split("Response A:\n", 1)[1].split("\n\nResponse B:\n", 1)[0]
            b = user_text.split("Response B:\n", 1)[1].split("\n\nWhich response", 1)[0]
            fa = evaluation.rouge_n(a, ref, 1).f1
            fb = evaluation.rouge_n(b, ref, 1).f1
            if fa > fb:
                return "A"
            if fb > fa:
                return "B"
            return "tie"

        client = MockTextClient(fn=_policy)
    rng = np.random.default_rng(args.seed) if not args.no_randomize else None
    verdicts = [
        evaluation.judge_pair(ref, a, b, client, rng=rng) for _, ref, a, b in records
    ]
    rates = evaluation.aggregate_verdicts(verdicts)
    print(f"win_a={rates['win_a']:.4f} win_b={rates['win_b']:.4f} tie={rates['tie']:.4f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xraygpt", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    parser.add_argument("--config", help="flat key=value config file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("curate", help="filter and clean a raw report corpus")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-label", default="")
    p.add_argument("--min-findings-words", type=int, default=10)
    p.add_argument("--min-impression-words", type=int, default=2)
    p.add_argument("--endpoint", help="rewrite-service endpoint (optional)")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("build-vocab", help="build the word vocabulary")
    p.add_argument("--curated", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int, default=512)
    p.add_argument("--instructions")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train the alignment layer for one stage")
    p.add_argument("--stage", choices=("1", "2"), required=True)
    p.add_argument("--curated", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features")
    p.add_argument("--image-root")
    p.add_argument("--instructions")
    p.add_argument("--init-checkpoint")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--loss-trace")
    p.add_argument("--total-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="greedy summary for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features")
    p.add_argument("--image-root")
    p.add_argument("--image", required=True)
    p.add_argument("--instruction")
    p.add_argument("--instructions")
    p.add_argument("--max-new-tokens", type=int, default=64)
    _add_model_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("chat", help="interactive terminal conversation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--features")
    p.add_argument("--image-root")
    p.add_argument("--image")
    p.add_argument("--max-new-tokens", type=int, default=64)
    _add_model_flags(p)
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("eval-rouge", help="score candidate/reference pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out")
    p.add_argument("--label", default="run")
    p.set_defaults(func=cmd_eval_rouge)

    p = sub.add_parser("eval-judge", help="pairwise judge over two response sets")
    p.add_argument("--pairs", required=True)
    p.add_argument("--endpoint")
    p.add_argument("--no-randomize", action="store_true")
    p.set_defaults(func=cmd_eval_judge)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    file_cfg = _read_config_file(args.config) if args.config else {}
    for key, value in file_cfg.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, value)
    logger.info("run fingerprint %s", run_fingerprint(args))
    try:
        return args.func(args)
    except ServiceUnavailableError as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (XrayGPTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
