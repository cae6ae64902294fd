"""
Utility helper functions for experiment runs
(ids, hashing, structured logs, seeding, formatting)
"""

import hashlib
import json
import os
import random
import secrets
from datetime import datetime
from pathlib import Path

import numpy as np
import psutil
import torch


# ========================================
# ID GENERATION
# ========================================


def generate_run_id(prefix="run"):
    """Generate run ID: prefix_YYYYmmddHHMMSS_xxxxxxxx"""
    timestamp = datetime.now().strftime("%Y%m%d%H%M%S")
    unique = secrets.token_hex(4)
    return f"{prefix}_{timestamp}_{unique}"


# ========================================
# HASHING
# ========================================


def canonical_json(data):
    """Stable JSON text: sorted keys, no whitespace"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def fingerprint(data):
    """SHA-256 hex digest of the canonical JSON form"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def file_checksum(path, algorithm="sha256", chunk_size=1 << 20):
    digest = hashlib.new(algorithm)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parameter_checksum(module):
    """SHA-256 over every parameter and buffer, in state_dict order"""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ========================================
# STRUCTURED LOGS
# ========================================


def append_jsonl(path, record):
    """Append one JSON record per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# ========================================
# SYSTEM
# ========================================


def process_memory_mb():
    """Resident set size of the current process, MB"""
    return round(psutil.Process(os.getpid()).memory_info().rss / (1024 * 1024), 1)


def seed_everything(seed):
    """Seed python, numpy and torch; request deterministic torch kernels"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ========================================
# FORMATTING HELPERS
# ========================================


def format_duration(seconds):
    """12.3s / 4m 05s / 1h 02m"""
    seconds = float(seconds)
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, secs = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m {secs:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes:02d}m"
