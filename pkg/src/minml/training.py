"""Training loops, checkpointing, and a trace-recording harness.

Checkpoints get their own container: magic and version, a JSON header
(epoch, optimizer recipe, backend rng state), the serialized model, then
the optimizer's state arrays. Restore order matters: load the model first
(layer constructors draw initializers from the backend rng), then restore
the rng state so a resumed run consumes the exact counter sequence the
uninterrupted run would have.
"""

import gc
import json
import struct
import time
import uuid

import numpy as np

from . import data, memory, models, nn, optim, registry
from . import _tensor as T
from .autograd import Variable, no_grad
from .distributed import data_parallel_sync
from .eager import EagerBackend
from .errors import FormatError

CHECKPOINT_MAGIC = b"MNCK"
CHECKPOINT_VERSION = 1


def model_backend(model):
    params = model.params()
    if not params:
        raise ValueError("model has no parameters")
    return params[0].backend_id


def train_step(model, images, labels, optimizer, comm=None, on_loss=None):
    """One optimizer step on a host batch; returns (loss value, outputs)."""
    backend = model_backend(model)
    x = Variable(T.tensor(images, backend=backend))
    y = T.tensor(labels, backend=backend)
    optimizer.zero_grad()
    out = model(x)
    loss = nn.cross_entropy(out, y)
    if on_loss is not None:
        on_loss(loss)
    loss.backward()
    if comm is not None:
        data_parallel_sync(comm, optimizer.params)
    optimizer.step()
    return loss.scalar(), out


def train_epoch(model, batches, optimizer, comm=None, on_loss=None):
    """One pass over a batch dataset; returns (mean loss, accuracy)."""
    model.train()
    loss_meter = nn.AverageMeter()
    acc_meter = nn.AccuracyMeter()
    for images, labels in batches:
        value, out = train_step(model, images, labels, optimizer, comm, on_loss)
        on_loss = None
        loss_meter.update(value, len(labels))
        acc_meter.update(out, labels)
    return loss_meter.result(), acc_meter.result()


def evaluate(model, batches):
    """Mean loss and accuracy over a batch dataset, without touching grads."""
    was_training = model.training
    model.eval()
    backend = model_backend(model)
    loss_meter = nn.AverageMeter()
    acc_meter = nn.AccuracyMeter()
    with no_grad():
        for images, labels in batches:
            x = T.tensor(images, backend=backend)
            y = T.tensor(labels, backend=backend)
            out = model(x)
            loss_meter.update(nn.cross_entropy(out, y).scalar(), len(labels))
            acc_meter.update(out, labels)
    if was_training:
        model.train()
    return loss_meter.result(), acc_meter.result()


def fit(model, train_set, optimizer, epochs, batch_size, eval_set=None, seed=0,
        workers=0, start_epoch=0, on_epoch=None, on_loss=None, comm=None):
    """Epoch loop over a raw item dataset.

    Shuffling is reseeded as seed + epoch, so a run resumed at start_epoch
    sees the same data order the uninterrupted run would. on_epoch receives
    each metrics record; on_loss fires once, on the first step's loss.
    """
    shuffled = data.Shuffle(train_set, seed)
    eval_batches = data.Batch(eval_set, batch_size) if eval_set is not None else None
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        begin = time.perf_counter()
        shuffled.reseed(seed + epoch)
        batches = data.Batch(shuffled, batch_size)
        if workers:
            batches = data.Prefetch(batches, workers=workers)
        train_loss, train_acc = train_epoch(model, batches, optimizer, comm, on_loss)
        on_loss = None
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_accuracy": train_acc,
        }
        if eval_batches is not None:
            test_loss, test_acc = evaluate(model, eval_batches)
            record["test_loss"] = test_loss
            record["test_accuracy"] = test_acc
        record["wall_seconds"] = time.perf_counter() - begin
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history


# -- checkpoints

_OPTIMIZER_KINDS = {
    "sgd": (optim.SGD, ("lr", "momentum", "weight_decay")),
    "adam": (optim.Adam, ("lr", "beta1", "beta2", "eps", "weight_decay")),
}


def _optimizer_kind(optimizer):
    for kind, (cls, _) in _OPTIMIZER_KINDS.items():
        if type(optimizer) is cls:
            return kind
    raise FormatError(f"cannot checkpoint optimizer type {type(optimizer).__name__}")


class Checkpoint:
    """What load_checkpoint hands back; restore_optimizer rebuilds the rest."""

    def __init__(self, model, epoch, rng_state, optimizer_recipe, optimizer_arrays, extra):
        self.model = model
        self.epoch = epoch
        self.rng_state = rng_state
        self.optimizer_recipe = optimizer_recipe
        self.optimizer_arrays = optimizer_arrays
        self.extra = extra

    def restore_optimizer(self, params=None):
        if self.optimizer_recipe is None:
            raise FormatError("checkpoint was saved without optimizer state")
        cls, _ = _OPTIMIZER_KINDS[self.optimizer_recipe["kind"]]
        optimizer = cls(self.model.params() if params is None else params,
                        **self.optimizer_recipe["hyper"])
        optimizer.load_state_config(self.optimizer_recipe["config"])
        optimizer.load_state_entries(dict(self.optimizer_arrays))
        return optimizer

    def restore_rng(self, backend=None):
        backend = registry.default() if backend is None else registry.get(backend)
        backend.rng.restore(self.rng_state)


def save_checkpoint(path, model, optimizer=None, epoch=0, extra=None):
    backend = registry.get(model_backend(model))
    header = {"epoch": int(epoch), "rng": backend.rng.state(), "extra": extra or {}}
    if optimizer is not None:
        kind = _optimizer_kind(optimizer)
        _, fields = _OPTIMIZER_KINDS[kind]
        header["optimizer"] = {
            "kind": kind,
            "hyper": {f: getattr(optimizer, f) for f in fields},
            "config": optimizer.state_config(),
        }
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    nn._w_str(buf, json.dumps(header, sort_keys=True))
    blob = nn.serialize(model)
    buf += struct.pack("<Q", len(blob))
    buf += blob
    entries = optimizer.state_entries() if optimizer is not None else []
    buf += struct.pack("<I", len(entries))
    for name, array in entries:
        nn._w_array(buf, name, array)
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_checkpoint(path, backend=None):
    with open(path, "rb") as f:
        raw = f.read()
    r = nn._Reader(raw)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    header = json.loads(r.string())
    model = nn.deserialize(bytes(r.take(r.u64())), backend=backend)
    arrays = []
    for _ in range(r.u32()):
        name = r.string()
        dtype = np.dtype(r.string())
        shape = tuple(r.u64() for _ in range(r.u8()))
        arrays.append((name, np.frombuffer(r.take(r.u64()), dtype=dtype).reshape(shape).copy()))
    if r.pos != len(raw):
        raise FormatError(f"{len(raw) - r.pos} trailing bytes", offset=r.pos)
    return Checkpoint(
        model=model,
        epoch=header["epoch"],
        rng_state=header["rng"],
        optimizer_recipe=header.get("optimizer"),
        optimizer_arrays=arrays,
        extra=header.get("extra", {}),
    )


# -- trace recording

def record_training_trace(n=96, batch=12, epochs=2, seed=0):
    """Capture real allocator traffic from a short CNN run on blob images.

    A baseline evaluation pass at the training batch size runs before the
    optimizer exists; the blocks it cycles through the cache are what the
    optimizer state and the training steps later carve up, which is
    exactly the regime where split policies and plain caching diverge.
    Returns the trace as a list of lines.
    """
    backend = EagerBackend(name=f"trace-rec-{uuid.uuid4().hex[:8]}", seed=seed)
    registry.register(backend)
    recorder = memory.RecordingManager(memory.NativeManager())
    backend.attach_manager(recorder)
    try:
        model = models.mnist_cnn(backend=backend.name)
        blobs = data.synth_blobs(n, seed=seed, shape=(1, 28, 28))
        evaluate(model, data.Batch(blobs, batch))
        optimizer = optim.Adam(model.params(), lr=1e-3)
        fit(model, blobs, optimizer, epochs=epochs, batch_size=batch, seed=seed)
        model = optimizer = None
        gc.collect()
        backend.detach_manager()
        return list(recorder.lines)
    finally:
        registry.unregister(backend.name)
