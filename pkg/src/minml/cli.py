"""Command line front end: train a small CNN, benchmark backends, or
replay allocator traces.

Every run is deterministic under --seed on the eager backend; the only
report fields that vary between identical runs are wall-clock timings.
"""

import argparse
import gc
import json
import os
import sys
import time
import traceback

from dataclasses import dataclass, field

from . import data, figures, memory, models, nn, optim, registry, training
from . import _tensor as T
from .autograd import Variable
from .errors import (
    AllocError,
    CollectiveShapeError,
    CollectiveTimeout,
    ConfigError,
    DataError,
    Error,
    FormatError,
    ManagerBusy,
    OutOfMemory,
    TraceError,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MEMORY = 4
EXIT_COLLECTIVE = 5

_EXIT_DOC = """\
exit codes:
  0  success
  1  unexpected internal error
  2  bad usage or configuration
  3  data problem (missing IDX files, unreadable trace or checkpoint)
  4  memory manager error (out of memory, allocator misuse)
  5  collective communication failure

files written to --out by train: metrics.jsonl, model.flck, training.png
"""

SYNTH_TRAIN_N = 512
SYNTH_EVAL_N = 256


def _parse_alloc(text):
    name, _, arg = text.partition(":")
    if name == "split":
        if not arg:
            return "split_restricted", memory.DEFAULT_SPLIT_THRESHOLD
        try:
            threshold = int(arg, 0)
        except ValueError:
            raise ConfigError(f"bad split threshold {arg!r}") from None
        if threshold < 0:
            raise ConfigError(f"split threshold must be >= 0, got {threshold}")
        return "split_restricted", threshold
    if arg or name not in ("native", "caching"):
        raise ConfigError(f"unknown allocator policy {text!r}")
    return name, None


def _parse_policies(text):
    entries = [p.strip() for p in text.split(",") if p.strip()]
    if not entries:
        raise ConfigError("empty policy list")
    return [(label,) + _parse_alloc(label) for label in entries]


@dataclass
class RunConfig:
    subcommand: str
    backend: str = "eager"
    alloc: str = "caching"
    threshold: int = None
    epochs: int = 2
    batch: int = 32
    lr: float = 1e-3
    optim: str = "adam"
    workers: int = 0
    data_dir: str = None
    synthetic: bool = False
    seed: int = 0
    out: str = "."
    graph_dot: str = None
    mem_telemetry: bool = False
    model: str = "cnn"
    iters: int = 100
    warmup: int = 100
    trace: str = None
    policies: list = field(default_factory=list)
    record_from_train: bool = False

    @classmethod
    def from_args(cls, args):
        known = set(cls.__dataclass_fields__) - {"policies"}
        fields = {k: v for k, v in vars(args).items() if k in known and v is not None}
        config = cls(**fields)
        if args.subcommand in ("train", "bench"):
            config.alloc, config.threshold = _parse_alloc(config.alloc)
        if args.subcommand == "memsim":
            config.policies = _parse_policies(args.policies)
        config.validate()
        return config

    def validate(self):
        for name, minimum in (("epochs", 0), ("batch", 1), ("workers", 0),
                              ("seed", 0), ("iters", 1), ("warmup", 0)):
            if getattr(self, name) < minimum:
                raise ConfigError(f"--{name} must be >= {minimum}, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ConfigError(f"--lr must be positive, got {self.lr}")
        if self.subcommand == "train":
            if self.synthetic and self.data_dir:
                raise ConfigError("--synthetic and --data-dir are mutually exclusive")
            if not self.synthetic and not self.data_dir:
                raise ConfigError("training needs --data-dir or --synthetic")
        if self.graph_dot and self.backend != "deferred":
            raise ConfigError("--graph-dot needs --backend deferred")
        if self.subcommand == "memsim" and self.trace and self.record_from_train:
            raise ConfigError("--trace and --record-from-train are mutually exclusive")


def _attach(backend_id, config):
    """Swap the backend's manager for the configured policy.

    Retries once behind a collection pass so repeated in-process runs can
    reclaim the previous run's buffers first.
    """
    backend = registry.get(backend_id)
    manager = memory.make_manager(config.alloc, threshold=config.threshold)
    try:
        backend.attach_manager(manager)
    except ManagerBusy:
        gc.collect()
        backend.attach_manager(manager)
    return manager


def _make_optimizer(config, params):
    if config.optim == "adam":
        return optim.Adam(params, lr=config.lr)
    return optim.SGD(params, lr=config.lr, momentum=0.9)


def _emit(record):
    print(json.dumps(record, sort_keys=True), flush=True)


# -- train


def cmd_train(config):
    backend = registry.get(config.backend)
    backend.seed(config.seed)
    manager = _attach(config.backend, config)
    if config.synthetic:
        train_set = data.synth_blobs(SYNTH_TRAIN_N, seed=config.seed, shape=(1, 28, 28))
        eval_set = data.synth_blobs(SYNTH_EVAL_N, seed=config.seed + 1, shape=(1, 28, 28))
    else:
        train_set = data.mnist_dataset(config.data_dir, "train")
        eval_set = data.mnist_dataset(config.data_dir, "test")
    model = models.mnist_cnn(backend=config.backend)
    optimizer = _make_optimizer(config, model.params())

    on_loss = None
    if config.graph_dot:
        def on_loss(loss):
            with open(config.graph_dot, "w", encoding="ascii") as f:
                f.write(backend.to_dot(loss.data))

    history = training.fit(
        model, train_set, optimizer,
        epochs=config.epochs, batch_size=config.batch, eval_set=eval_set,
        seed=config.seed, workers=config.workers,
        on_epoch=_emit, on_loss=on_loss,
    )
    if config.mem_telemetry:
        _emit({"allocator": manager.stats().as_dict()})

    os.makedirs(config.out, exist_ok=True)
    with open(os.path.join(config.out, "metrics.jsonl"), "w", encoding="ascii") as f:
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    training.save_checkpoint(
        os.path.join(config.out, "model.flck"), model, optimizer, epoch=config.epochs
    )
    if history:
        figures.training_curves(history, os.path.join(config.out, "training.png"))
    return EXIT_OK


# -- bench


def _force_params(optimizer):
    for p in optimizer.params:
        p.force()


def _bench_loop(model, batches, optimizer, warmup, iters):
    model.train()
    backend = training.model_backend(model)
    n = len(batches)
    for i in range(warmup):
        images, labels = batches[i % n]
        training.train_step(model, images, labels, optimizer)
        _force_params(optimizer)
    phases = {"data": 0.0, "forward": 0.0, "backward": 0.0, "step": 0.0}
    losses = []
    for i in range(warmup, warmup + iters):
        t0 = time.perf_counter()
        images, labels = batches[i % n]
        t1 = time.perf_counter()
        x = Variable(T.tensor(images, backend=backend))
        y = T.tensor(labels, backend=backend)
        optimizer.zero_grad()
        out = model(x)
        loss = nn.cross_entropy(out, y)
        losses.append(loss.scalar())
        t2 = time.perf_counter()
        loss.backward()
        t3 = time.perf_counter()
        optimizer.step()
        _force_params(optimizer)
        t4 = time.perf_counter()
        phases["data"] += t1 - t0
        phases["forward"] += t2 - t1
        phases["backward"] += t3 - t2
        phases["step"] += t4 - t3
    return phases, losses


def cmd_bench(config):
    backends = ("eager", "deferred") if config.backend == "both" else (config.backend,)
    if config.model == "cnn":
        blobs = data.synth_blobs(config.batch * 8, seed=config.seed, shape=(1, 28, 28))
    else:
        blobs = data.synth_blobs(config.batch * 8, seed=config.seed, dim=784)
    batches = data.Batch(blobs, config.batch, drop_last=True)
    runs = []
    for backend_id in backends:
        backend = registry.get(backend_id)
        backend.seed(config.seed)
        manager = _attach(backend_id, config)
        if config.model == "cnn":
            model = models.mnist_cnn(backend=backend_id)
        else:
            model = models.mlp(784, 128, 10, backend=backend_id)
        optimizer = _make_optimizer(config, model.params())
        phases, losses = _bench_loop(model, batches, optimizer, config.warmup, config.iters)
        run = {
            "backend": backend_id,
            "phases": phases,
            "total_seconds": sum(phases.values()),
            "losses": losses,
        }
        if config.mem_telemetry:
            run["allocator"] = manager.stats().as_dict()
        runs.append(run)
    report = {
        "model": config.model,
        "batch": config.batch,
        "iters": config.iters,
        "warmup": config.warmup,
        "runs": runs,
    }
    if len(runs) == 2:
        report["max_loss_gap"] = max(
            abs(a - b) for a, b in zip(runs[0]["losses"], runs[1]["losses"])
        )

    print("backend\ttotal_s\tdata_s\tforward_s\tbackward_s\tstep_s\tfinal_loss")
    for run in runs:
        p = run["phases"]
        print(f"{run['backend']}\t{run['total_seconds']:.4f}\t{p['data']:.4f}"
              f"\t{p['forward']:.4f}\t{p['backward']:.4f}\t{p['step']:.4f}"
              f"\t{run['losses'][-1]:.6f}")
    if "max_loss_gap" in report:
        print(f"max loss gap: {report['max_loss_gap']:.3e}")

    if config.out:
        os.makedirs(config.out, exist_ok=True)
        with open(os.path.join(config.out, "bench.json"), "w", encoding="ascii") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
        figures.bench_bars(report, os.path.join(config.out, "bench.png"))
    return EXIT_OK


# -- memsim


def cmd_memsim(config):
    recorded = None
    if config.record_from_train:
        recorded = training.record_training_trace()
        lines = recorded
    elif config.trace:
        try:
            with open(config.trace, "r", encoding="ascii") as f:
                lines = f.read().splitlines()
        except OSError as exc:
            raise DataError(f"cannot read trace {config.trace!r}: {exc}") from None
    else:
        lines = memory.load_bundled_trace()
    events = memory.parse_trace(lines)

    results = []
    for label, policy, threshold in config.policies:
        result = memory.replay(events, policy, threshold=threshold)
        result.policy = label
        results.append(result)
        _emit({
            "policy": label,
            "stats": result.stats.as_dict(),
            "peak_internal_fragmentation": result.peak_internal_fragmentation,
        })

    base = next((r for r in results if r.policy.startswith("caching")), results[0])
    print("policy\tpeak_internal_frag\tvs_" + base.policy)
    for result in results:
        if result is base:
            rel = "baseline"
        elif base.peak_internal_fragmentation == 0:
            rel = "n/a"
        else:
            change = (result.peak_internal_fragmentation - base.peak_internal_fragmentation
                      ) / base.peak_internal_fragmentation
            rel = f"{change:+.1%}"
        print(f"{result.policy}\t{result.peak_internal_fragmentation}\t{rel}")

    if config.out:
        os.makedirs(config.out, exist_ok=True)
        if recorded is not None:
            with open(os.path.join(config.out, "recorded.trace"), "w", encoding="ascii") as f:
                f.write("\n".join(recorded) + "\n")
        payload = [{
            "policy": r.policy,
            "stats": r.stats.as_dict(),
            "peak_internal_fragmentation": r.peak_internal_fragmentation,
        } for r in results]
        with open(os.path.join(config.out, "memsim.json"), "w", encoding="ascii") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
        if events:
            figures.replay_timelines(results, os.path.join(config.out, "memsim.png"))
    return EXIT_OK


# -- wiring


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="minml",
        description="Train, benchmark, and simulate allocators for the minml library.",
        epilog=_EXIT_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, backends=("eager", "deferred")):
        p.add_argument("--backend", choices=backends, default="eager")
        p.add_argument("--alloc", default="caching", metavar="native|caching|split:<bytes>")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", metavar="DIR")
        p.add_argument("--mem-telemetry", action="store_true", dest="mem_telemetry")

    train = sub.add_parser("train", help="train the reference CNN, write metrics and a checkpoint")
    common(train)
    train.add_argument("--epochs", type=int, default=2)
    train.add_argument("--batch", type=int, default=32)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--optim", choices=("sgd", "adam"), default="adam")
    train.add_argument("--workers", type=int, default=0, help="prefetch worker threads")
    train.add_argument("--data-dir", dest="data_dir", metavar="DIR", help="directory with MNIST IDX files")
    train.add_argument("--synthetic", action="store_true", help="train on generated class blobs")
    train.add_argument("--graph-dot", dest="graph_dot", metavar="PATH",
                       help="write the first loss graph as DOT (deferred backend)")

    bench = sub.add_parser("bench", help="time train iterations per phase and backend")
    common(bench, backends=("eager", "deferred", "both"))
    bench.add_argument("--model", choices=("mlp", "cnn"), default="cnn")
    bench.add_argument("--batch", type=int, default=32)
    bench.add_argument("--lr", type=float, default=1e-3)
    bench.add_argument("--optim", choices=("sgd", "adam"), default="adam")
    bench.add_argument("--iters", type=int, default=100)
    bench.add_argument("--warmup", type=int, default=100)

    memsim = sub.add_parser("memsim", help="replay an allocation trace under allocator policies")
    common(memsim)
    memsim.add_argument("--trace", metavar="PATH", help="trace file (default: bundled trace)")
    memsim.add_argument("--policies", default="native,caching,split:1048576",
                        metavar="P1,P2,...")
    memsim.add_argument("--record-from-train", action="store_true", dest="record_from_train",
                        help="record the trace from a short CNN training run")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        config = RunConfig.from_args(args)
        handler = {"train": cmd_train, "bench": cmd_bench, "memsim": cmd_memsim}
        return handler[config.subcommand](config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TraceError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OutOfMemory, AllocError, ManagerBusy) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MEMORY
    except (CollectiveTimeout, CollectiveShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COLLECTIVE
    except Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception:
        traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
