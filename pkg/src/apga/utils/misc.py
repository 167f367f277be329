import hashlib
import queue
from threading import Event, Thread
from typing import Iterable, Iterator

import torch

_DTYPES = {"fp32": torch.float32, "fp64": torch.float64}


def resolve_dtype(precision: str) -> torch.dtype:
    """Map a precision tag ("fp32" / "fp64") to a torch dtype."""
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision should be fp32/fp64, not {precision}.") from None


def derive_seed(*parts) -> int:
    """
    Derive a 63-bit seed from an arbitrary tuple of ints/strings.

    All randomness in training is keyed on (run seed, purpose, counter) through
    this function, so any step can be replayed without carrying RNG state.
    """
    key = "/".join(str(p) for p in parts).encode("utf8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def make_generator(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g


def param_digest(module: torch.nn.Module) -> str:
    """sha256 over the raw bytes of every parameter, in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode("utf8"))
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class PrefetchLoader:
    """
    Iterate a batch sequence while a background thread produces the next
    items. Items are delivered in production order through a bounded queue,
    so the producer blocks once `depth` batches are waiting. Closing the
    iterator early stops the producer and joins it.
    """

    _DONE = object()
    _PUT_TIMEOUT = 0.1

    def __init__(self, source: Iterable, depth: int = 2):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.source = source
        self.depth = depth
        self.thread = None

    def __iter__(self) -> Iterator:
        q = queue.Queue(maxsize=self.depth)
        stop = Event()
        # catch and re-raise any exception from the producer thread
        failure = []

        def _put(item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=self._PUT_TIMEOUT)
                    return True
                except queue.Full:
                    continue
            return False

        def _produce():
            try:
                for item in self.source:
                    if not _put(item):
                        return
            except Exception as e:
                failure.append(e)
            finally:
                _put(self._DONE)

        self.thread = Thread(target=_produce, daemon=True)
        self.thread.start()
        try:
            while True:
                item = q.get()
                if item is self._DONE:
                    break
                yield item
        finally:
            stop.set()
            self.thread.join()
        if failure:
            raise RuntimeError("Failure in batch prefetch thread") from failure[0]
