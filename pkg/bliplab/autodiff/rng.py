import hashlib
from typing import Dict, Tuple, Union

import numpy as np
import numpy.typing as npt

StreamKey = Union[str, int]


def _key_to_int(key: StreamKey) -> int:
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        if key < 0:
            raise ValueError(f"Stream index must be non-negative, got {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=4)
    # Offset string keys away from small integer indices
    return int.from_bytes(digest.digest(), "little") | (1 << 32)


class RngStream:
    """
    A named, splittable random stream.

    Every stream is identified by a root seed plus a path of names and
    indices, e.g. ``("mc-sample", 3)``. Child streams are derived through
    ``numpy.random.SeedSequence`` spawn keys, so two streams with
    different paths are statistically independent and a given path always
    yields the same numbers regardless of the order in which streams are
    created.

    Parameters
    ----------
    seed : int
        The root seed.
    path : Tuple[StreamKey, ...], optional
        The names identifying this stream below the root.
    """

    def __init__(self, seed: int, path: Tuple[StreamKey, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        sequence = np.random.SeedSequence(
            self.seed, spawn_key=tuple(_key_to_int(k) for k in self.path)
        )
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *names: StreamKey) -> "RngStream":
        """Return the independent sub-stream ``self.path + names``."""
        return RngStream(self.seed, self.path + tuple(names))

    def normal(self, shape) -> npt.NDArray[np.float64]:
        return self.generator.standard_normal(shape)

    def uniform(self, shape) -> npt.NDArray[np.float64]:
        return self.generator.random(shape)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self.generator.permutation(n)

    def get_state(self) -> Dict:
        """JSON-serializable state of the underlying bit generator."""
        return {
            "seed": self.seed,
            "path": list(self.path),
            "bit_generator": self.generator.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: Dict) -> "RngStream":
        stream = cls(state["seed"], tuple(state["path"]))
        stream.generator.bit_generator.state = state["bit_generator"]
        return stream

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"
