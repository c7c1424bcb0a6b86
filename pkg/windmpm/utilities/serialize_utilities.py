"""
msgpack + blosc blobs for run archive attributes.  Numpy arrays (plain and structured) and dataclasses such as
:class:`~windmpm.scene.Scene` or :class:`~windmpm.inverse.ReconOptions` are encoded; dataclasses come back as plain
dictionaries.
"""

import blosc
import dataclasses
import msgpack
import numpy as np
from typing import Any, Iterable

# numpy and HDF5 attributes strip trailing b'\x00' from byte strings, so every blob ends with this guard
GUARD = b'1'
NP_KEY = '__nd__'


def _encode(obj):

    if isinstance(obj, np.ndarray):
        if obj.dtype.names is None:
            return {NP_KEY: True, 'data': obj.tobytes(), 'dtype': obj.dtype.str, 'shape': list(obj.shape)}
        # particle records and other structured arrays
        return {NP_KEY: True, 'data': obj.tobytes(), 'fields': obj.dtype.descr, 'shape': list(obj.shape)}
    if isinstance(obj, (np.bool_, np.number)):
        return obj.item()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)

    raise TypeError(f'Cannot serialize object of type {type(obj)}')


def _decode(obj: dict):

    if not obj.get(NP_KEY):
        return obj
    if 'fields' in obj:
        dtype = np.dtype([(f[0], f[1], tuple(f[2])) if len(f) > 2 else (f[0], f[1]) for f in obj['fields']])
    else:
        dtype = np.dtype(obj['dtype'])
    return np.frombuffer(obj['data'], dtype=dtype).reshape(obj['shape'])


def msgpack_dumps(x: Any, compress: bool = True) -> bytes:
    """
    Pack ``x`` (optionally blosc compressed) and append the guard byte.
    """
    data = msgpack.packb(x, use_bin_type=True, use_single_float=False, default=_encode)
    if compress:
        data = blosc.compress(data, typesize=8)
    return data + GUARD


def msgpack_loads(x: bytes, use_list: bool = False, compress: bool = True) -> Any:
    """
    Inverse of :func:`msgpack_dumps`.  Arrays come back read-only.

    :param x: packed bytes including the guard byte
    :param use_list: decode sequences as lists instead of tuples
    :param compress: the blob was written with ``compress=True``
    :return: unpacked object
    """
    data = bytes(x)[:-len(GUARD)]
    if compress:
        data = blosc.decompress(data)
    return msgpack.unpackb(data, raw=False, use_list=use_list, strict_map_key=False, object_hook=_decode)


def str_dtype(strings: Iterable[str]) -> str:
    """
    Column dtype 'sN' wide enough for the longest utf-8 encoded string (at least 's1').
    """
    return f"s{max([1] + [len(s.encode('utf-8')) for s in strings])}"
