import threading
from typing import Dict


class OpTracker:
    """Forward/backward propagation counters for one denoiser."""

    def __init__(self, name="Denoiser"):
        self.name = name
        self.forward_count = 0
        self.backward_count = 0
        self._lock = threading.Lock()

    def add_forward(self, n: int = 1):
        with self._lock:
            self.forward_count += n

    def add_backward(self, n: int = 1):
        with self._lock:
            self.backward_count += n

    def total_ops(self):
        return self.forward_count + self.backward_count

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {"forwards": self.forward_count, "backwards": self.backward_count}

    def since(self, snapshot: Dict[str, int]) -> Dict[str, int]:
        now = self.snapshot()
        return {k: now[k] - snapshot[k] for k in now}

    def summary(self):
        return (
            f"[{self.name}] Forwards: {self.forward_count}, "
            f"Backwards: {self.backward_count}, "
            f"Total: {self.total_ops()}"
        )
