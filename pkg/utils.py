from concurrent.futures import ThreadPoolExecutor, as_completed
import csv
from enum import Enum
import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Callable, Iterable, List, Sequence

from tqdm import tqdm
import yaml

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(output_dir=None, verbose=False):
    """Configure the root logger: console handler plus ``<output_dir>/log.log``."""
    root = logging.getLogger()
    level = logging.DEBUG if verbose else logging.INFO
    root.setLevel(level)
    for handler in list(root.handlers):
        if getattr(handler, '_blowup_handler', False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    handlers = [logging.StreamHandler()]
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(output_dir, 'log.log')))
    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
        handler._blowup_handler = True
        root.addHandler(handler)
    return root


def read_yaml(file_path):
    with open(file_path, 'r') as stream:
        try:
            return yaml.safe_load(stream)
        except yaml.YAMLError as exc:
            logger.error('cannot parse %s: %s', file_path, exc)
            return None


def fmt_float(x) -> str:
    """17 significant digits, enough to round-trip a double."""
    return '%.17g' % x


def _plain(value):
    # numpy scalars and arrays -> builtin types for json
    if isinstance(value, Enum):
        return value.value
    if hasattr(value, 'tolist'):
        return _plain(value.tolist())
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ('inf' if value > 0 else '-inf')
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def dump_json(data, fname):
    with open(fname, 'w', encoding='utf8') as fout:
        json.dump(_plain(data), fout, indent=2, ensure_ascii=False, allow_nan=False)


def load_json(fname):
    with open(fname, 'r', encoding='utf8') as fin:
        return json.load(fin)


def dump_jsonl(data, fname):
    with open(fname, 'w', encoding='utf8') as fout:
        for line in data:
            fout.write(json.dumps(_plain(line), ensure_ascii=False) + '\n')


def iter_jsonl(fname, cnt=None):
    i = 0
    with open(fname, 'r', encoding='utf8') as fin:
        for line in fin:
            if line.strip() == '':
                continue
            if i == cnt:
                break
            yield json.loads(line)
            i += 1


def write_csv(fname, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    with open(fname, 'w', newline='', encoding='utf8') as fout:
        writer = csv.writer(fout)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])


def read_csv(fname) -> List[dict]:
    with open(fname, 'r', newline='', encoding='utf8') as fin:
        return list(csv.DictReader(fin))


def config_hash(config: dict) -> str:
    canonical = json.dumps(_plain(config), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf8')).hexdigest()


def resolve_workers(requested=None) -> int:
    workers = requested or os.cpu_count() or 1
    cap = os.getenv('BLOWUP_THREADS')
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            logger.warning('ignoring non-integer BLOWUP_THREADS=%r', cap)
    return max(1, int(workers))


class TimeAccumulator:
    """Running sum with Neumaier compensation, like ``math.fsum`` but incremental."""

    def __init__(self, value=0.0):
        self._s = float(value)
        self._c = 0.0

    def add(self, y):
        s = self._s + y
        if abs(self._s) >= abs(y):
            self._c += (self._s - s) + y
        else:
            self._c += (y - s) + self._s
        self._s = s

    @property
    def value(self) -> float:
        return self._s + self._c


def thread_function(target: Callable, idx: int, item: Any):
    try:
        return idx, target(item), None
    except Exception as exc:  # recorded by the caller, the pool keeps going
        logger.exception('sweep point %d failed', idx)
        return idx, None, exc


def run_thread_pool(target: Callable, items: Sequence[Any], max_work_count: int, desc=None):
    """Yield ``(index, result, error)`` for every item as the workers finish."""
    with tqdm(total=len(items), desc=desc) as pbar:
        with ThreadPoolExecutor(max_workers=max_work_count) as t:
            futures = [t.submit(thread_function, target, i, items[i])
                       for i in range(len(items))]
            for future in as_completed(futures):
                pbar.update(1)
                yield future.result()


def ordered_pool_results(target: Callable, items: Sequence[Any], max_work_count: int, desc=None):
    """Run the pool and return ``[(result, error), ...]`` in input order."""
    result_map = {}
    for i, result, error in run_thread_pool(target, items, max_work_count, desc=desc):
        result_map[i] = (result, error)
    return [result_map[i] for i in range(len(items))]
