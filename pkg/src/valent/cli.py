"""Command-line entry point: ``valent <command> [flags]``.

Every command writes its primary outputs (CSV tables, JSON summaries) to the
output directory and a ``<command>.run.json`` sidecar holding timestamps and
execution-only settings (output dir, thread count). Primary outputs are
byte-identical across repeated runs and thread counts.

Precedence for settings: built-in defaults < ``--config`` JSON < flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .corpus_io import (bundled, file_digest, load_model, load_probe_corpus, load_retrieval, load_sts,
                        load_tokenizer, save_tokenizer, spec_fingerprint, tokenize, write_archive,
                        write_cache)
from .errors import ConfigError, InputError, ValentError
from .evaluation import DevTask, evaluate_rerank, evaluate_retrieval, evaluate_sts
from .layerselect import (SelectionPolicy, model_layer_encoder, parse_layer_set, select_layers,
                          sweep_layers)
from .pooling import PoolSpec, embed_many, get_template
from .probes import (LogitLensConfig, SegmentProbeConfig, layerwise_mean_embedder, logit_lens_probe,
                     segment_match_probe)
from .transformer import Model, ModelConfig

log = logging.getLogger("valent")

CLI_METHODS = ("hs_mean", "last_token", "weighted_mean", "echo", "va", "wva", "aligned_wva")
EXECUTION_KEYS = ("out", "threads", "config")

DEFAULTS = {
    "gen-toy": {"d": 32, "layers": 4, "heads": 4, "kv_heads": None, "d_ff": None, "vocab": None,
                "max_seq_len": 512, "norm": "rms", "activation": "gelu", "pos": "rope", "seed": 0,
                "tokenizer": None},
    "embed": {"model": None, "tokenizer": None, "method": "va", "layers": "half", "template": "none",
              "sentences": None},
    "eval-sts": {"model": None, "tokenizer": None, "method": "va", "layers": "half", "template": "none",
                 "sts": None},
    "eval-retrieval": {"model": None, "tokenizer": None, "method": "va", "layers": "half",
                       "template": "none", "corpus": None, "k": "10"},
    "eval-rerank": {"model": None, "tokenizer": None, "method": "va", "layers": "half",
                    "template": "none", "corpus": None},
    "sweep-layers": {"model": None, "tokenizer": None, "method": "va", "sts": None, "retrieval": None,
                     "rerank": None, "anchor": "retrieval", "delta": 2.0, "veto": 0.1, "min_layers": 3,
                     "max_layers": 8},
    "probe-segments": {"model": None, "tokenizer": None, "method": "va", "corpus": None, "k": "1,5,10",
                       "seed": 0, "split_lo": 0.25, "split_hi": 0.75, "max_tokens": 512,
                       "min_tokens": 8},
    "probe-logitlens": {"model": None, "tokenizer": None, "corpus": None, "offsets": "1,2,3",
                        "tau": 1.0, "seed": 0, "prefix_lo": 50, "prefix_hi": 150, "truncate": 2000,
                        "top_n": 100},
}
COMMON = {"out": None, "threads": 1, "config": None}


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    try:
        vals = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not vals:
        raise ConfigError("empty integer list")
    return vals


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--out", help="output directory (fallback: $VALENT_OUT_DIR, then ./valent-out)")
    p.add_argument("--threads", type=int, help="worker threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _add_model(p: argparse.ArgumentParser, pooling: bool = True) -> None:
    p.add_argument("--model", help="tensor archive written by gen-toy")
    p.add_argument("--tokenizer", help="tokenizer JSON (default: bundled toy vocabulary)")
    if pooling:
        p.add_argument("--method", choices=CLI_METHODS)
        p.add_argument("--layers", help="full | half | explicit:1,2,3 | preset:llama2_7b | preset:qwen3_8b")
        p.add_argument("--template", choices=("none", "prompt_eol", "future_eol", "echo"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="valent", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"valent {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-toy", help="write a seeded random model archive")
    p.add_argument("--d", type=int, help="model width")
    p.add_argument("--layers", type=int, help="number of transformer layers")
    p.add_argument("--heads", type=int)
    p.add_argument("--kv-heads", type=int, help="key/value heads (default: --heads)")
    p.add_argument("--d-ff", type=int, help="FFN width (default 4*d)")
    p.add_argument("--vocab", type=int, help="vocabulary size (default: tokenizer size)")
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--norm", choices=("rms", "layernorm"))
    p.add_argument("--activation", choices=("gelu", "silu"))
    p.add_argument("--pos", choices=("rope", "learned"))
    p.add_argument("--seed", type=int)
    p.add_argument("--tokenizer", help="tokenizer JSON to size the vocabulary and copy alongside")
    _add_common(p)

    p = sub.add_parser("embed", help="embed a sentences file into a JSONL cache")
    _add_model(p)
    p.add_argument("--sentences", help="one sentence per line, optionally 'id<TAB>text'")
    _add_common(p)

    p = sub.add_parser("eval-sts", help="Spearman correlation on an STS TSV")
    _add_model(p)
    p.add_argument("--sts", help="STS TSV (default: bundled mini-STS)")
    _add_common(p)

    p = sub.add_parser("eval-retrieval", help="NDCG@k on a retrieval JSONL set")
    _add_model(p)
    p.add_argument("--corpus", help="retrieval JSONL (default: bundled)")
    p.add_argument("--k", help="cutoff (default 10)")
    _add_common(p)

    p = sub.add_parser("eval-rerank", help="MAP on a rerank JSONL set")
    _add_model(p)
    p.add_argument("--corpus", help="rerank JSONL (default: bundled)")
    _add_common(p)

    p = sub.add_parser("sweep-layers", help="single-layer sweep plus default layer-set selection")
    _add_model(p, pooling=False)
    p.add_argument("--method", choices=("va", "hs_mean"))
    p.add_argument("--sts")
    p.add_argument("--retrieval")
    p.add_argument("--rerank")
    p.add_argument("--anchor", help="anchor task name (default: retrieval)")
    p.add_argument("--delta", type=float)
    p.add_argument("--veto", type=float, help="veto fraction")
    p.add_argument("--min-layers", type=int)
    p.add_argument("--max-layers", type=int)
    _add_common(p)

    p = sub.add_parser("probe-segments", help="layerwise prefix/suffix segment matching")
    _add_model(p, pooling=False)
    p.add_argument("--method", choices=("va", "hs_mean"))
    p.add_argument("--corpus", help="plain-text corpus, blank-line separated (default: bundled)")
    p.add_argument("--k", help="comma-separated recall cutoffs (default 1,5,10)")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-lo", type=float)
    p.add_argument("--split-hi", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--min-tokens", type=int)
    _add_common(p)

    p = sub.add_parser("probe-logitlens", help="logit-lens MRR of continuation tokens per layer")
    _add_model(p, pooling=False)
    p.add_argument("--corpus")
    p.add_argument("--offsets", help="comma-separated continuation offsets (default 1,2,3)")
    p.add_argument("--tau", type=float, help="unembedding temperature (default 1.0)")
    p.add_argument("--seed", type=int)
    p.add_argument("--prefix-lo", type=int)
    p.add_argument("--prefix-hi", type=int)
    p.add_argument("--truncate", type=int)
    p.add_argument("--top-n", type=int)
    _add_common(p)
    return parser


def effective_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    cfg.update(COMMON)
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg})") from None
        unknown = set(from_file) - set(cfg)
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)} for {command}")
        cfg.update(from_file)
    for key, val in vars(args).items():
        if key in cfg and val is not None:
            cfg[key] = val
    cfg["config"] = args.config
    if not cfg.get("out"):
        cfg["out"] = os.environ.get("VALENT_OUT_DIR") or "valent-out"
    cfg["threads"] = max(int(cfg.get("threads") or 1), 1)
    return cfg


class Run:
    """Collects reproducibility metadata and writes outputs for one command."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.corpora: dict[str, str] = {}
        self.files: list[str] = []
        self.started = time.time()

    def track(self, label: str, path) -> Path:
        self.corpora[label] = file_digest(path)
        return Path(path)

    def meta(self) -> dict:
        echoed = {k: v for k, v in self.cfg.items() if k not in EXECUTION_KEYS}
        seeds = {k: v for k, v in echoed.items() if k == "seed"}
        return {"tool": "valent", "version": __version__, "command": self.command, "config": echoed,
                "seeds": seeds, "corpus_digests": dict(sorted(self.corpora.items()))}

    def write_json(self, name: str, payload: dict) -> Path:
        doc = dict(payload)
        doc["meta"] = self.meta()
        path = self.out / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.files.append(name)
        return path

    def write_csv(self, name: str, body: str) -> Path:
        m = self.meta()
        header = (f"# valent {m['version']} {self.command}\n"
                  f"# config: {json.dumps(m['config'], sort_keys=True)}\n"
                  f"# corpus_digests: {json.dumps(m['corpus_digests'], sort_keys=True)}\n")
        path = self.out / name
        path.write_text(header + body, encoding="utf-8")
        self.files.append(name)
        return path

    def write_sidecar(self) -> None:
        doc = {"command": self.command, "started_unix": self.started, "finished_unix": time.time(),
               "elapsed_s": round(time.time() - self.started, 3), "out": str(self.out),
               "threads": self.cfg["threads"], "argv": sys.argv[1:], "primary_outputs": self.files}
        (self.out / f"{self.command}.run.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        log.info("%s: wrote %s to %s", self.command, ", ".join(self.files), self.out)


def _tokenizer(run: Run):
    path = run.cfg.get("tokenizer") or bundled("tokenizer.json")
    return load_tokenizer(run.track("tokenizer", path))


def _model(run: Run) -> Model:
    if not run.cfg.get("model"):
        raise InputError(f"{run.command} needs --model (an archive from gen-toy)")
    return load_model(run.track("model", run.cfg["model"]))


def _pool_spec(cfg: dict) -> PoolSpec:
    method, template = cfg["method"], get_template(cfg["template"])
    layer_set = parse_layer_set(cfg["layers"])
    if method == "echo":
        return PoolSpec("echo_mean", layer_set, get_template("echo"))
    if method == "wva":
        return PoolSpec("wva_last" if template.name == "none" else "wva_prompted", layer_set, template)
    return PoolSpec(method, layer_set, template)


def _check_vocab(model: Model, tok) -> None:
    if tok.vocab_size > model.config.vocab_size:
        raise ConfigError(f"tokenizer needs {tok.vocab_size} ids but the model vocabulary has "
                          f"{model.config.vocab_size}")


def _encoder(model, tok, spec, threads):
    return lambda texts: embed_many(model, tok, list(texts), spec, threads)


def cmd_gen_toy(run: Run) -> dict:
    c = run.cfg
    tok = _tokenizer(run)
    d, heads = int(c["d"]), int(c["heads"])
    if d % heads:
        raise ConfigError(f"--d {d} is not divisible by --heads {heads}")
    config = ModelConfig(
        d_model=d, n_layers=int(c["layers"]), n_heads=heads, n_kv_heads=int(c["kv_heads"] or heads),
        d_head=d // heads, d_ff=int(c["d_ff"] or 4 * d), vocab_size=int(c["vocab"] or tok.vocab_size),
        max_seq_len=int(c["max_seq_len"]), norm_kind=c["norm"], activation=c["activation"],
        pos_kind=c["pos"])
    model = Model.random(config, int(c["seed"]))
    digest = write_archive(model.weights, config, run.out / "model.vta", model.model_id)
    save_tokenizer(tok, run.out / "tokenizer.json")
    run.files += ["model.vta", "tokenizer.json"]
    summary = {"model_id": model.model_id, "archive": "model.vta", "archive_sha256": digest,
               "model_config": config.to_dict()}
    run.write_json("gen-toy.json", summary)
    return summary


def cmd_embed(run: Run) -> dict:
    model, tok = _model(run), _tokenizer(run)
    _check_vocab(model, tok)
    spec = _pool_spec(run.cfg)
    if not run.cfg.get("sentences"):
        raise InputError("embed needs --sentences")
    path = run.track("sentences", run.cfg["sentences"])
    ids, texts = [], []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        sid, sep, text = line.partition("\t")
        ids.append(sid if sep else str(i))
        texts.append(text if sep else line)
    vecs = embed_many(model, tok, texts, spec, run.cfg["threads"])
    fp = spec_fingerprint(spec.to_dict(), model.model_id)
    write_cache(run.out / "embeddings.jsonl", zip(ids, vecs), model.model_id, fp)
    run.files.append("embeddings.jsonl")
    summary = {"n": len(ids), "dim": int(vecs.shape[1]) if len(ids) else 0, "fingerprint": fp,
               "model_id": model.model_id, "spec": spec.to_dict()}
    run.write_json("embed.json", summary)
    return summary


def cmd_eval_sts(run: Run) -> dict:
    model, tok = _model(run), _tokenizer(run)
    _check_vocab(model, tok)
    spec = _pool_spec(run.cfg)
    pairs = load_sts(run.track("sts", run.cfg.get("sts") or bundled("mini_sts.tsv")))
    res = evaluate_sts(_encoder(model, tok, spec, run.cfg["threads"]), pairs)
    rows = "".join(f"{i},{res.cosines[i]!r},{res.golds[i]!r}\n" for i in range(len(pairs)))
    run.write_csv("eval-sts.csv", "pair,cosine,gold\n" + rows)
    summary = {"spearman": res.spearman, "n_pairs": len(pairs), "model_id": model.model_id,
               "spec": spec.to_dict()}
    run.write_json("eval-sts.json", summary)
    return summary


def _ranking_outputs(run: Run, name: str, metric: str, res, model, spec) -> dict:
    rows = "".join(f"{q},{v!r}\n" for q, v in res.per_query.items())
    run.write_csv(f"{name}.csv", f"query,{metric}\n" + rows)
    summary = {metric: res.score, "n_queries": len(res.per_query), "n_skipped": res.n_skipped,
               "model_id": model.model_id, "spec": spec.to_dict()}
    run.write_json(f"{name}.json", summary)
    return summary


def cmd_eval_retrieval(run: Run) -> dict:
    model, tok = _model(run), _tokenizer(run)
    _check_vocab(model, tok)
    spec = _pool_spec(run.cfg)
    k = int(run.cfg["k"])
    rs = load_retrieval(run.track("corpus", run.cfg.get("corpus") or bundled("mini_retrieval.jsonl")))
    res = evaluate_retrieval(_encoder(model, tok, spec, run.cfg["threads"]), rs, k=k)
    return _ranking_outputs(run, "eval-retrieval", f"ndcg@{k}", res, model, spec)


def cmd_eval_rerank(run: Run) -> dict:
    model, tok = _model(run), _tokenizer(run)
    _check_vocab(model, tok)
    spec = _pool_spec(run.cfg)
    rs = load_retrieval(run.track("corpus", run.cfg.get("corpus") or bundled("mini_rerank.jsonl")))
    res = evaluate_rerank(_encoder(model, tok, spec, run.cfg["threads"]), rs)
    return _ranking_outputs(run, "eval-rerank", "map", res, model, spec)


def cmd_sweep_layers(run: Run) -> dict:
    c = run.cfg
    model, tok = _model(run), _tokenizer(run)
    _check_vocab(model, tok)
    tasks = [
        DevTask("sts", "sts", load_sts(run.track("sts", c.get("sts") or bundled("mini_sts.tsv")))),
        DevTask("retrieval", "retrieval",
                load_retrieval(run.track("retrieval", c.get("retrieval") or bundled("mini_retrieval.jsonl")))),
        DevTask("rerank", "rerank",
                load_retrieval(run.track("rerank", c.get("rerank") or bundled("mini_rerank.jsonl")))),
    ]
    method = "va" if c["method"] == "va" else "hs"
    layers = list(range(1, model.config.n_layers + 1))
    matrix = sweep_layers(layers, tasks, model_layer_encoder(model, tok, method), c["threads"])
    policy = SelectionPolicy(anchor_task=c["anchor"], delta=float(c["delta"]),
                             min_layers=min(int(c["min_layers"]), len(layers)),
                             max_layers=min(int(c["max_layers"]), len(layers)),
                             veto_fraction=float(c["veto"]))
    # scores are worth keeping even when the policy then rejects every layer
    run.write_csv("layer_scores.csv", matrix.to_csv())
    chosen = select_layers(matrix, policy)
    summary = {"selected_layers": list(chosen.layers), "layer_set": chosen.describe(),
               "policy": dataclasses.asdict(policy),
               "model_id": model.model_id, "method": c["method"]}
    run.write_json("selection.json", summary)
    return summary


def _probe_docs(run: Run, tok) -> list[list[int]]:
    texts = load_probe_corpus(run.track("corpus", run.cfg.get("corpus") or bundled("probe_corpus.txt")))
    return [tokenize(tok, t) for t in texts]


def cmd_probe_segments(run: Run) -> dict:
    c = run.cfg
    model, tok = _model(run), _tokenizer(run)
    _check_vocab(model, tok)
    cfg = SegmentProbeConfig(split_lo=float(c["split_lo"]), split_hi=float(c["split_hi"]), seed=int(c["seed"]),
                             k_list=tuple(_int_list(c["k"])),
                             max_tokens=min(int(c["max_tokens"]), model.config.max_seq_len),
                             min_tokens=int(c["min_tokens"]))
    method = "va" if c["method"] == "va" else "hs"
    res = segment_match_probe(_probe_docs(run, tok), cfg, layerwise_mean_embedder(model, method), c["threads"])
    run.write_csv("segments.csv", res.to_csv())
    summary = {"recall": {str(l): {str(k): v for k, v in row.items()} for l, row in res.table().items()},
               "n_docs": res.n_docs, "n_skipped": res.n_skipped, "splits": res.splits,
               "model_id": model.model_id, "method": c["method"]}
    run.write_json("probe-segments.json", summary)
    return summary


def cmd_probe_logitlens(run: Run) -> dict:
    c = run.cfg
    model, tok = _model(run), _tokenizer(run)
    _check_vocab(model, tok)
    cfg = LogitLensConfig(prefix_lo=int(c["prefix_lo"]), prefix_hi=int(c["prefix_hi"]),
                          offsets=tuple(_int_list(c["offsets"])), truncate_tokens=int(c["truncate"]),
                          temperature=float(c["tau"]), top_n=int(c["top_n"]), seed=int(c["seed"]))
    res = logit_lens_probe(model, _probe_docs(run, tok), cfg, c["threads"])
    run.write_csv("logitlens.csv", res.to_csv())
    summary = {"final_mrr": {str(k): v for k, v in res.final.items()},
               "best_layer": {str(k): v for k, v in res.best_layer().items()},
               "n_instances": res.n_instances, "n_skipped": res.n_skipped,
               "prefix_lengths": res.prefix_lengths, "model_id": model.model_id}
    run.write_json("probe-logitlens.json", summary)
    return summary


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "embed": cmd_embed,
    "eval-sts": cmd_eval_sts,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-rerank": cmd_eval_rerank,
    "sweep-layers": cmd_sweep_layers,
    "probe-segments": cmd_probe_segments,
    "probe-logitlens": cmd_probe_logitlens,
}


def _fail(payload: dict) -> int:
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args.command, args)
        run = Run(args.command, cfg)
        COMMANDS[args.command](run)
        run.write_sidecar()
    except ValentError as exc:
        return _fail(exc.to_dict())
    except OSError as exc:
        return _fail({"error": "io_error", "message": str(exc), "path": getattr(exc, "filename", None)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
