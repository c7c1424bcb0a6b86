"""
RunArchive is the HDF5 column store every command writes its tabular output to: marker trajectories, loss traces,
energy traces and per-stage timings.  The object is passed the full path to the desired .h5 file; instantiating it
is harmless, all operations open the file on demand.

Example::

    archive = RunArchive('out/run.h5')
    archive.append_table('markers', {'frame': frames, 'particle': ids, 'x': x, 'y': y, 'z': z})
    archive.export_csv('markers', 'out/markers.csv')

Each table is a group with one compressed extendable array per column.  Table metadata (column dtypes, the package
version) and free-form attributes such as the run manifest are stored as msgpack+blosc blobs on the group.
"""

from datetime import datetime
import logging
import numpy as np
import os
import re
import tables as tb
import traceback
from typing import Any, Dict, Optional, Sequence
import uuid

from windmpm.errors import FormatError, ValidationError
from windmpm.utilities.serialize_utilities import msgpack_dumps, msgpack_loads, str_dtype

ATTR_COLDTYPE = 'col_dtype'
ATTR_NROWS = 'num_rows'
ATTR_TABLE = '_table_attrs'
ATTR_USER = '_user_attrs'
with open(os.path.join(os.path.dirname(__file__), 'VERSION')) as fd:
    VERSION = fd.read().strip()

MARKER_COLUMNS = {'frame': 'i', 'particle': 'i', 'x': 'f', 'y': 'f', 'z': 'f'}
LOSS_COLUMNS = {'frame': 'i', 'iter': 'i', 'obs': 'f', 'phys': 'f', 'total': 'f', 'step_size': 'f'}
ENERGY_COLUMNS = {'frame': 'i', 'kinetic': 'f', 'elastic': 'f', 'gravity_potential': 'f'}
TIMING_COLUMNS = {'stage': 's16', 'seconds': 'f'}


class RunArchive(object):

    def __init__(self, h5file: str):

        if not re.search(r'\.h5$', h5file):
            raise ValidationError(f'h5file should have a .h5 extension, got {h5file}')

        self._h5file = h5file

        # blosc at the highest level for every column
        self._filters = tb.Filters(complevel=9, complib='blosc', fletcher32=False)

    def __str__(self):

        with self.open(mode='r') as h5:
            return h5.__str__()

    @property
    def path(self) -> str:
        return self._h5file

    def exists(self) -> bool:
        return os.path.exists(self._h5file)

    def open(self, mode: str = 'a') -> tb.File:
        """
        Open the file and return the PyTables handle.  Use as a context manager::

            with archive.open(mode='r') as h5:
                ...

        :param mode: open mode in ['r', 'r+', 'a', 'w'] (default='a')
        :return: open file handle
        """

        if mode == 'a' or mode == 'w':
            dirname = os.path.dirname(self._h5file)
            if dirname:
                os.makedirs(dirname, exist_ok=True)
        elif not self.exists():
            raise FormatError(f'Run archive does not exist: {self._h5file}')

        return tb.open_file(self._h5file, mode=mode, filters=self._filters)

    def create_table(self, table_name: str, col_dtypes: Dict[str, str], col_shapes: Optional[dict] = None,
                     expectedrows: int = 10000) -> None:
        """
        Create an empty table.  Column dtypes:

            * 'i': 64-bit integer
            * 'f': 64-bit float
            * 'sx': length x utf-8 string (grown automatically on append)

        :param table_name: name of the table
        :param col_dtypes: dictionary of column-name -> dtype
        :param col_shapes: (optional) column shapes of the form (0,) or (0, x) for vector valued columns
        :param expectedrows: chunking hint
        """
        if col_shapes is None:
            col_shapes = {}

        with self.open(mode='a') as h5:
            self._create_table(h5, table_name, dict(col_dtypes), col_shapes, expectedrows=expectedrows)

    def _create_table(self, h5: tb.File, table_path: str, col_dtype: dict, col_shapes: dict, expectedrows: int = 10000):

        for col in col_dtype:
            col_dtype[col] = col_dtype[col].lower()

        for col_name, dtype in col_dtype.items():
            self._create_column(h5, self._path(table_path, col_name), dtype, col_shapes.get(col_name, (0,)),
                                expectedrows=expectedrows)

        self._write_attrs(h5, table_path, ATTR_TABLE, ATTR_COLDTYPE, col_dtype)

    def delete_table(self, table_name: str, raise_exception: bool = False) -> None:
        """
        Delete the table if it exists.  The file does not shrink until :meth:`repack` is called.

        :param table_name: table to delete
        :param raise_exception: raise if the table doesn't exist
        """
        nodepath = self._norm_path(table_name)
        with self.open(mode='a') as h5:
            if raise_exception:
                h5.remove_node(nodepath, recursive=True)
            else:
                try:
                    h5.remove_node(nodepath, recursive=True)
                except tb.NoSuchNodeError:
                    pass

    def append_table(self, table_name: str, col_data: Dict[str, Sequence], col_dtypes: Optional[dict] = None) -> None:
        """
        Append rows to every column of a table.  Data for all columns must be given and have equal lengths.  If the
        table does not exist it is created, from ``col_dtypes`` when given, otherwise from the data.

        The append is all-or-nothing: if any column fails, the columns already extended are truncated back to the
        previous row count and the error is re-raised.

        :param table_name: name of the table
        :param col_data: dictionary of {'column_name': [data1, data2, ...], ...}
        :param col_dtypes: dtypes used only when the table is created by this call
        """
        with self.open(mode='a') as h5:
            self._append_table(h5, table_name, col_data, col_dtypes or {})

    def _append_table(self, h5: tb.File, table_path: str, col_data: dict, col_dtypes: dict):

        data_lengths = [len(d) for d in col_data.values()]
        if len(set(data_lengths)) > 1:
            raise ValidationError(f'Column lengths are not equal on append to {table_path}: {data_lengths} '
                                  f'in {self._h5file}')

        table_attrs = self._read_attrs(h5, table_path, ATTR_TABLE)
        if len(table_attrs) == 0:
            if not col_dtypes:
                col_dtypes = {col: self._dtype_from_data(data) for col, data in col_data.items()}
            shapes = {}
            for col, data in col_data.items():
                sp = (0,)
                if isinstance(data, np.ndarray) and data.ndim > 1:
                    sp = (0,) + data.shape[1:]
                shapes[col] = sp
            self._create_table(h5, table_path, dict(col_dtypes), shapes)
            table_attrs = self._read_attrs(h5, table_path, ATTR_TABLE)

        coldt = table_attrs[ATTR_COLDTYPE]
        if set(coldt.keys()) != set(col_data.keys()):
            raise ValidationError(f'Columns given for append to {table_path} do not match the table. '
                                  f'dtypes={sorted(coldt.keys())} ... col_data={sorted(col_data.keys())} '
                                  f'in {self._h5file}')

        prev_nrows = self._table_info(h5, table_path)[ATTR_NROWS]
        restore = False
        error_msg = ''
        for col, coldtype in coldt.items():

            try:
                data = self._convert_data(col_data[col])
                colpath = self._path(table_path, col)

                if re.match(r's(\d+)', coldtype):
                    colnode = self._safe_col_str_change(h5, table_path, col, coldtype, data)
                else:
                    colnode = self._get_node(h5, colpath)
                    if colnode is None:
                        raise FormatError(f"Table column doesn't exist: {colpath} in {self._h5file}")

                colnode.append(data)
            except Exception:
                restore = True
                error_msg = traceback.format_exc()
                break

        if restore:
            for col in coldt:
                node = self._get_node(h5, self._path(table_path, col))
                if node is not None and int(node.shape[0]) > prev_nrows:
                    node.truncate(prev_nrows)

            raise FormatError(f'Append to {table_path} failed and was rolled back in {self._h5file}:\n{error_msg}')

    def read_table(self, table_name: str, cols: Optional[Sequence[str]] = None,
                   frames: Optional[Sequence[int]] = None) -> Dict[str, np.ndarray]:
        """
        Read columns of a table as numpy arrays.  String columns are decoded to unicode arrays.

        Example read::

            data = archive.read_table('loss_trace', cols=['iter', 'total'], frames=[0])

        :param table_name: table to read
        :param cols: return only these columns (default all)
        :param frames: keep only rows whose 'frame' column is in this list (table must have a 'frame' column)
        :return: dictionary of column name to array
        """

        with self.open(mode='r') as h5:

            table_attrs = self._read_attrs(h5, table_name, ATTR_TABLE)
            if len(table_attrs) == 0:
                raise FormatError(f"{table_name} doesn't exist in {self._h5file}")
            col_dtype = table_attrs[ATTR_COLDTYPE]

            return_cols = list(col_dtype.keys())
            if cols:
                missing = set(cols).difference(return_cols)
                if missing:
                    raise ValidationError(f'Columns {sorted(missing)} not in {table_name} in {self._h5file}')
                return_cols = list(cols)

            inds = None
            if frames is not None:
                if 'frame' not in col_dtype:
                    raise ValidationError(f"{table_name} has no 'frame' column in {self._h5file}")
                frame_col = self._get_node(h5, self._path(table_name, 'frame')).read()
                inds = np.nonzero(np.isin(frame_col, np.asarray(frames)))[0]

            return_data = {}
            for col in return_cols:
                node = self._get_node(h5, self._path(table_name, col))
                return_data[col] = node.read() if inds is None else node.read()[inds]

        for col in return_data:
            if col_dtype[col][0] == 's':
                return_data[col] = np.char.decode(return_data[col], 'utf-8')

        return return_data

    def table_info(self, table_name: str) -> dict:
        """
        Column datatypes and row count of a table, as::

            * col_dtype: dict of column data types
            * num_rows: number of rows in table

        Returns an empty dictionary if the table doesn't exist.

        :param table_name: table name
        :return: info dictionary
        """

        with self.open(mode='r') as h5:
            return self._table_info(h5, table_name)

    def table_nrows(self, table_name: str) -> int:
        return self.table_info(table_name).get(ATTR_NROWS, 0)

    def _table_info(self, h5: tb.File, table_name: str) -> dict:

        table_attrs = self._read_attrs(h5, table_name, ATTR_TABLE)
        if len(table_attrs) > 0:
            table_attrs[ATTR_NROWS] = 0
            for colname in table_attrs[ATTR_COLDTYPE]:
                node = self._get_node(h5, self._path(table_name, colname))
                table_attrs[ATTR_NROWS] = int(node.shape[0])
                break

        return table_attrs

    def list_tables(self) -> list:
        """
        Names of all tables in the archive.
        """
        if not self.exists():
            return []
        with self.open(mode='r') as h5:
            tables = []
            for g in h5.walk_groups('/'):
                if ATTR_TABLE in g._v_attrs:
                    tables.append(g._v_pathname.lstrip('/'))
        return sorted(tables)

    def write_attrs(self, name: str, key: str, value: Any) -> None:
        """
        Store an arbitrary msgpack-serializable value (dicts, lists, numpy arrays) under ``key`` on the group
        ``name``, creating the group if needed.  Use ``name='/'`` for run level attributes such as the manifest.

        :param name: group path
        :param key: attribute key
        :param value: value to store
        """
        with self.open(mode='a') as h5:
            nodepath = self._norm_path(name)
            if self._get_node(h5, nodepath) is None:
                h5.create_group(os.path.dirname(nodepath), os.path.basename(nodepath), createparents=True)
            self._write_attrs(h5, nodepath, ATTR_USER, key, value)

    def read_attrs(self, name: str) -> dict:
        """
        All attributes written with :meth:`write_attrs` on ``name`` (plus '_version').  Empty if none.
        """
        if not self.exists():
            return {}
        with self.open(mode='r') as h5:
            return self._read_attrs(h5, name, ATTR_USER)

    def export_csv(self, table_name: str, path: str, cols: Optional[Sequence[str]] = None) -> None:
        """
        Write a table to a plot-ready CSV file with a header row.

        :param table_name: table to export
        :param path: output csv path
        :param cols: column order (default: table order)
        """
        data = self.read_table(table_name, cols=cols)
        cols = list(cols) if cols else list(data.keys())
        dirname = os.path.dirname(path)
        if dirname:
            os.makedirs(dirname, exist_ok=True)
        nrows = len(data[cols[0]]) if cols else 0
        with open(path, 'w', encoding='utf-8') as fd:
            fd.write(','.join(cols) + '\n')
            for i in range(nrows):
                fd.write(','.join(_csv_cell(data[c][i]) for c in cols) + '\n')

    def repack(self) -> None:
        """
        Re-write the entire file, recompressing data and eliminating free space left by deleted tables.
        """

        tmp_name = self._h5file + '.' + str(uuid.uuid4())
        with self.open(mode='r') as h5:
            h5.copy_file(tmp_name, filters=self._filters)
        os.remove(self._h5file)
        os.rename(tmp_name, self._h5file)
        with self.open(mode='a') as h5:
            data = [datetime.now().timestamp(), h5.get_filesize()]
            try:
                h5.get_node('/_last_repack')[:] = data
            except tb.NoSuchNodeError:
                h5.create_array('/', '_last_repack', obj=data)
            logging.info(f'Repacked {self._h5file} to {data[1]} bytes')

    @staticmethod
    def _dtype_from_data(data) -> str:
        arr = np.asarray(data)
        if arr.dtype.kind in 'US':
            return str_dtype([str(x) for x in arr.ravel()])
        elif arr.dtype.kind in 'iub':
            return 'i'
        elif arr.dtype.kind == 'f':
            return 'f'
        raise ValidationError(f'Unsupported column data type {arr.dtype}')

    @staticmethod
    def _convert_data(data) -> np.ndarray:

        data = np.asarray(data)
        if data.dtype.kind == 'U':
            data = np.char.encode(data, 'utf-8')
        return data

    def _create_column(self, h5: tb.File, colpath: str, col_dtype: str, shape: tuple,
                       expectedrows: int = 10000) -> tb.EArray:

        if col_dtype == 'f':
            atom = tb.Float64Atom()
        elif col_dtype == 'i':
            atom = tb.Int64Atom()
        elif re.match(r's(\d+)$', col_dtype):
            atom = tb.StringAtom(int(col_dtype[1:]))
        else:
            raise ValidationError(f'Unrecognized col_dtype: {col_dtype} for {colpath}')

        return h5.create_earray(
            os.path.dirname(colpath), os.path.basename(colpath), createparents=True,
            atom=atom, shape=tuple(shape), expectedrows=expectedrows, filters=self._filters
        )

    def _safe_col_str_change(self, h5: tb.File, table_path: str, colname: str, coldtype: str,
                             data: np.ndarray) -> tb.EArray:

        colpath = self._path(table_path, colname)
        colnode = self._get_node(h5, colpath)
        if colnode is None:
            raise FormatError(f"Table column doesn't exist: {colpath} in {self._h5file}")

        size = int(coldtype[1:])
        dlen = data.dtype.itemsize if len(data) else 0
        if dlen > size:
            logging.warning(f'Changing column size to {dlen} and overwriting ... {colpath}')

            tmp_col_path = colpath + '_tmp'
            newcolnode = self._create_column(h5, tmp_col_path, f's{dlen}', (0,))
            if colnode.nrows:
                newcolnode.append(colnode.read())

            h5.remove_node(colpath)
            h5.rename_node(tmp_col_path, colname)

            colnode = self._get_node(h5, colpath)
            table_attrs = self._read_attrs(h5, table_path, ATTR_TABLE)
            col_dtypes = table_attrs[ATTR_COLDTYPE]
            col_dtypes[colname] = f's{dlen}'
            self._write_attrs(h5, table_path, ATTR_TABLE, ATTR_COLDTYPE, col_dtypes)

        return colnode

    def _path(self, table_path: str, colname: str) -> str:
        return self._norm_path(table_path, colname=colname)

    def _get_node(self, h5: tb.File, nodepath: str):

        try:
            return h5.get_node(self._norm_path(nodepath))
        except tb.NoSuchNodeError:
            return None

    @staticmethod
    def _norm_path(path: str, colname: str = '') -> str:

        parts = [p for p in path.split('/') if p]
        if colname:
            parts.extend(p for p in colname.split('/') if p)
        return '/' + '/'.join(parts)

    def _write_attrs(self, h5: tb.File, node_path: str, blob: str, attrs_name: str, attrs_value: Any):
        node = self._get_node(h5, node_path)
        try:
            attrs = msgpack_loads(node._v_attrs[blob], use_list=True)
        except KeyError:
            attrs = {}

        attrs['_version'] = VERSION
        attrs[attrs_name] = attrs_value
        node._v_attrs[blob] = msgpack_dumps(attrs)

    def _read_attrs(self, h5: tb.File, node_path: str, blob: str) -> dict:
        node = self._get_node(h5, node_path)
        if node is None or blob not in node._v_attrs:
            return {}
        return msgpack_loads(node._v_attrs[blob], use_list=True)


def _csv_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)
