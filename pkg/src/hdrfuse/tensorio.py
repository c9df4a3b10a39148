"""Named-tensor archive used for backbone weights and checkpoints.

The container is a numpy ``.npz`` file: a zip of ``.npy`` members, one
per tensor, keyed by name.  Every tensor entry is stored as
little-endian 32-bit float (``<f4``) with its shape recorded in the
``.npy`` header, so save/load round-trips are bit-exact.  Entries under
the ``meta/`` prefix carry non-tensor payload (UTF-8 JSON as uint8
bytes, or int64 scalars) and are exempt from the float32 rule.
"""

import json

import numpy as np

__all__ = ["save_tensors", "load_tensors", "pack_json", "unpack_json"]

META_PREFIX = "meta/"


def save_tensors(path, tensors):
    """Write a name -> array mapping; tensor entries are coerced to <f4."""
    payload = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if name.startswith(META_PREFIX):
            payload[name] = arr
        else:
            payload[name] = np.ascontiguousarray(arr, dtype="<f4")
    np.savez(path, **payload)


def load_tensors(path):
    """Read a named-tensor archive back into a dict of arrays."""
    with np.load(path) as data:
        return {name: data[name] for name in data.files}


def pack_json(obj):
    """Encode a JSON-serializable object as a uint8 array for a meta/ entry."""
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def unpack_json(arr):
    return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))
