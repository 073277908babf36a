import hashlib
import logging
import os
import sys

LOG_FORMAT = '[%(asctime)s.%(msecs)03d] %(message)s'
LOG_DATEFMT = '%H:%M:%S'


def check_mkdir(dir_name):
    if not os.path.exists(dir_name):
        os.makedirs(dir_name)


def setup_logging(run_dir, level=logging.INFO):
    """Attach log.txt and stdout handlers to the root logger; returns them for teardown."""
    root = logging.getLogger()
    root.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT)
    handlers = [logging.FileHandler(os.path.join(run_dir, 'log.txt')),
                logging.StreamHandler(sys.stdout)]
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    return handlers


def teardown_logging(handlers):
    root = logging.getLogger()
    for handler in handlers:
        root.removeHandler(handler)
        handler.close()


def content_hash(data):
    """git blob sha1 of a string or bytes."""
    if isinstance(data, str):
        data = data.encode('utf-8')
    return hashlib.sha1(b'blob %d\0' % len(data) + data).hexdigest()


def write_manifest(config, path):
    """Resolved config as YAML, preceded by its content hash as a comment line."""
    text = config.dump()
    digest = content_hash(text)
    with open(path, 'w') as f:
        f.write(f'# content-hash: {digest}\n')
        f.write(text)
    return digest


def mark_partial(run_dir, reason):
    with open(os.path.join(run_dir, 'PARTIAL'), 'w') as f:
        f.write(f'{reason}\n')
