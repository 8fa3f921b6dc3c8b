"""Instrumented tensor-op dispatcher.

Each call is one "dispatch" (the CPU stand-in for a kernel launch). A call
without an ``out=`` buffer also counts as one buffer allocation; in-place
ops and ``out=`` variants do not. Views (slicing, transpose, view) are free.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import torch


@dataclass
class StepMetrics:
    dispatch_count: int = 0
    alloc_count: int = 0
    wall_time: float = 0.0
    sampler_calls: int = 0

    def __add__(self, other: "StepMetrics") -> "StepMetrics":
        return StepMetrics(
            self.dispatch_count + other.dispatch_count,
            self.alloc_count + other.alloc_count,
            self.wall_time + other.wall_time,
            self.sampler_calls + other.sampler_calls,
        )


class Dispatcher:
    def __init__(self):
        self.dispatch_count = 0
        self.alloc_count = 0
        self._lock = threading.Lock()

    def _tick(self, allocates: bool) -> None:
        with self._lock:
            self.dispatch_count += 1
            if allocates:
                self.alloc_count += 1

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.dispatch_count, self.alloc_count

    def _run(self, fn, *args, out=None, **kw):
        self._tick(out is None)
        if out is None:
            return fn(*args, **kw)
        return fn(*args, out=out, **kw)

    # -- elementwise / linear algebra ------------------------------------
    def matmul(self, a, b, out=None):
        return self._run(torch.matmul, a, b, out=out)

    def add(self, a, b, out=None):
        return self._run(torch.add, a, b, out=out)

    def sub(self, a, b, out=None):
        return self._run(torch.sub, a, b, out=out)

    def mul(self, a, b, out=None):
        return self._run(torch.mul, a, b, out=out)

    def div(self, a, b, out=None):
        return self._run(torch.div, a, b, out=out)

    def exp(self, x, out=None):
        return self._run(torch.exp, x, out=out)

    def rsqrt(self, x, out=None):
        return self._run(torch.rsqrt, x, out=out)

    def sigmoid(self, x, out=None):
        return self._run(torch.sigmoid, x, out=out)

    def mean(self, x, dim, keepdim=False, out=None):
        return self._run(torch.mean, x, dim, keepdim=keepdim, out=out)

    def sum(self, x, dim, keepdim=False, out=None):
        return self._run(torch.sum, x, dim, keepdim=keepdim, out=out)

    def amax(self, x, dim, keepdim=False, out=None):
        return self._run(torch.amax, x, dim, keepdim=keepdim, out=out)

    def cat(self, tensors, dim=0, out=None):
        return self._run(torch.cat, tensors, dim, out=out)

    def index_select(self, x, dim, index, out=None):
        return self._run(torch.index_select, x, dim, index, out=out)

    def contiguous(self, x, out=None):
        if out is None:
            self._tick(True)
            return x.contiguous()
        self._tick(False)
        return out.copy_(x)

    def softmax(self, x, dim, out=None):
        # numerically the same max-shifted exp/sum/div sequence in every mode
        m = self.amax(x, dim, keepdim=True)
        e = self.exp(self.sub(x, m))
        s = self.sum(e, dim, keepdim=True)
        return self.div(e, s, out=out)

    # -- in-place -----------------------------------------------------------
    def index_copy_(self, target, dim, index, source):
        self._tick(False)
        return target.index_copy_(dim, index, source)

    def index_fill_(self, target, dim, index, value):
        self._tick(False)
        return target.index_fill_(dim, index, value)

    def fill_(self, target, value):
        self._tick(False)
        return target.fill_(value)

    def copy_(self, target, source):
        self._tick(False)
        return target.copy_(source)

    # -- constructors (recompute path rebuilds these every step) --------------
    def arange(self, start, end=None, device=None):
        self._tick(True)
        if end is None:
            return torch.arange(start, device=device)
        return torch.arange(start, end, device=device)

    def causal_mask(self, t: int, s: int, dtype, device=None):
        """Additive mask letting query i (placed at key s - t + i) see keys <= itself."""
        q = self.arange(t, device=device)
        k = self.arange(s, device=device)
        q = self.add(q, s - t)
        allowed = self._run(torch.le, k[None, :], q[:, None])
        zero = torch.zeros((), dtype=dtype, device=device)
        ninf = torch.full((), float("-inf"), dtype=dtype, device=device)
        return self._run(torch.where, allowed, zero, ninf)

    # -- replay ----------------------------------------------------------------
    def replay(self, program) -> None:
        """Run a captured op list. Every entry writes into a preallocated buffer."""
        with self._lock:
            self.dispatch_count += len(program)
        for fn, args, kwargs in program:
            fn(*args, **kwargs)


class Recorder(Dispatcher):
    """Capture pass for fixed-shape stepping.

    Ops run once (the warm-up) and are recorded with their result tensor
    bound as the ``out=`` buffer, so :meth:`Dispatcher.replay` recomputes the
    whole step in place. Inputs are read through the tensors captured here;
    callers inject new values by writing into those buffers.
    """

    def __init__(self):
        super().__init__()
        self.program: list = []

    def _run(self, fn, *args, out=None, **kw):
        self._tick(out is None)
        if out is None:
            out = fn(*args, **kw)
        else:
            fn(*args, out=out, **kw)
        self.program.append((fn, args, {**kw, "out": out}))
        return out

    def contiguous(self, x, out=None):
        self._tick(out is None)
        if out is None:
            out = torch.empty(x.shape, dtype=x.dtype, device=x.device)
        out.copy_(x)
        self.program.append((torch.Tensor.copy_, (out, x), {}))
        return out

    def _inplace(self, method, target, *args):
        self._tick(False)
        method(target, *args)
        self.program.append((method, (target, *args), {}))
        return target

    def index_copy_(self, target, dim, index, source):
        return self._inplace(torch.Tensor.index_copy_, target, dim, index, source)

    def index_fill_(self, target, dim, index, value):
        return self._inplace(torch.Tensor.index_fill_, target, dim, index, value)

    def fill_(self, target, value):
        return self._inplace(torch.Tensor.fill_, target, value)

    def copy_(self, target, source):
        return self._inplace(torch.Tensor.copy_, target, source)

    def arange(self, start, end=None, device=None):
        raise RuntimeError("arange depends on host values and cannot be captured; inject a buffer")

    def causal_mask(self, t, s, dtype, device=None):
        raise RuntimeError("masks must be prepared outside the captured step")
