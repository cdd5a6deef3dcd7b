import hashlib
import json
import logging
import os
import sqlite3
from datetime import datetime, timedelta, timezone
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _connect(db_path: str) -> sqlite3.Connection:
    return sqlite3.connect(db_path)


def init_cache_db(db_path: str) -> str:
    """Create the result table if missing; returns the path."""
    directory = os.path.dirname(os.path.abspath(db_path))
    os.makedirs(directory, exist_ok=True)

    conn = _connect(db_path)
    cursor = conn.cursor()
    cursor.execute('''
        CREATE TABLE IF NOT EXISTS results (
            key TEXT PRIMARY KEY,
            sequence TEXT,
            value TEXT NOT NULL,
            ttl_hours INTEGER DEFAULT 168,
            created_at TEXT NOT NULL
        )
    ''')
    cursor.execute('''
        CREATE INDEX IF NOT EXISTS idx_sequence ON results(sequence)
    ''')
    conn.commit()
    conn.close()
    logger.debug(f"✅ result cache ready at {db_path}")
    return db_path


def generate_cache_key(sequence_digest: str, weights_digest: str, config_json: str) -> str:
    """
    Key for one (sequence, weights, config) evaluation.

    Args:
        sequence_digest: Content hash of the frames and ground truth
        weights_digest: Hash of the network parameters
        config_json: Canonical JSON of the run config
    """
    key_str = f"{sequence_digest}|{weights_digest}|{config_json}"
    return hashlib.md5(key_str.encode()).hexdigest()


def get_cached(db_path: str, key: str) -> Optional[Dict[str, Any]]:
    """Cached result, or None when missing or older than its TTL."""
    try:
        conn = _connect(db_path)
        cursor = conn.cursor()
        cursor.execute('SELECT value, created_at, ttl_hours FROM results WHERE key = ?', (key,))
        row = cursor.fetchone()
        conn.close()
    except sqlite3.Error as e:
        logger.warning(f"⚠️ cache read failed for {key}: {e}")
        return None

    if not row:
        return None
    value, created_at, ttl_hours = row
    if _now() - datetime.fromisoformat(created_at) > timedelta(hours=ttl_hours):
        delete_cached(db_path, key)
        return None
    return json.loads(value)


def set_cached(db_path: str, key: str, sequence: str, value: Dict[str, Any], ttl_hours: int = 168) -> bool:
    try:
        conn = _connect(db_path)
        cursor = conn.cursor()
        cursor.execute('''
            INSERT OR REPLACE INTO results (key, sequence, value, ttl_hours, created_at)
            VALUES (?, ?, ?, ?, ?)
        ''', (key, sequence, json.dumps(value), ttl_hours, _now().isoformat()))
        conn.commit()
        conn.close()
        return True
    except sqlite3.Error as e:
        logger.warning(f"⚠️ cache write failed for {key}: {e}")
        return False


def delete_cached(db_path: str, key: str) -> bool:
    try:
        conn = _connect(db_path)
        cursor = conn.cursor()
        cursor.execute('DELETE FROM results WHERE key = ?', (key,))
        conn.commit()
        conn.close()
        return True
    except sqlite3.Error as e:
        logger.warning(f"⚠️ cache delete failed for {key}: {e}")
        return False


def clear_expired_cache(db_path: str, now: Optional[datetime] = None) -> int:
    """
    Remove every entry older than its TTL.

    Returns:
        Number of entries deleted
    """
    now = now or _now()
    conn = _connect(db_path)
    cursor = conn.cursor()
    cursor.execute('SELECT key, created_at, ttl_hours FROM results')
    expired = [key for key, created_at, ttl in cursor.fetchall()
               if now - datetime.fromisoformat(created_at) > timedelta(hours=ttl)]
    cursor.executemany('DELETE FROM results WHERE key = ?', [(k,) for k in expired])
    conn.commit()
    conn.close()
    if expired:
        logger.info(f"🧹 removed {len(expired)} expired cache entries")
    return len(expired)


def get_cache_stats(db_path: str) -> Dict[str, Any]:
    conn = _connect(db_path)
    cursor = conn.cursor()
    cursor.execute('SELECT COUNT(*), COUNT(DISTINCT sequence), SUM(LENGTH(value)), MIN(created_at), MAX(created_at) FROM results')
    total, sequences, size_bytes, oldest, newest = cursor.fetchone()
    conn.close()
    return {
        "total_entries": total,
        "sequences": sequences,
        "size_mb": round((size_bytes or 0) / (1024 * 1024), 2),
        "database_file": db_path,
        "oldest_entry": oldest,
        "newest_entry": newest,
    }
