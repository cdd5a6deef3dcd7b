from datetime import datetime, timedelta, timezone

from app.cache import (
    clear_expired_cache,
    generate_cache_key,
    get_cache_stats,
    get_cached,
    init_cache_db,
    set_cached,
)


def test_key_depends_on_every_part():
    base = generate_cache_key("seq", "w", "{}")
    assert base == generate_cache_key("seq", "w", "{}")
    assert base != generate_cache_key("seq2", "w", "{}")
    assert base != generate_cache_key("seq", "w2", "{}")
    assert base != generate_cache_key("seq", "w", '{"a": 1}')


def test_set_then_get(tmp_path):
    db = init_cache_db(str(tmp_path / "cache" / "results.db"))
    assert get_cached(db, "k") is None
    assert set_cached(db, "k", "seq", {"auc": 0.5})
    assert get_cached(db, "k") == {"auc": 0.5}
    stats = get_cache_stats(db)
    assert stats["total_entries"] == 1
    assert stats["sequences"] == 1


def test_expired_entries(tmp_path):
    db = init_cache_db(str(tmp_path / "results.db"))
    set_cached(db, "old", "seq", {"v": 1}, ttl_hours=1)
    set_cached(db, "new", "seq", {"v": 2}, ttl_hours=100)
    later = datetime.now(timezone.utc) + timedelta(hours=2)
    assert clear_expired_cache(db, now=later) == 1
    assert get_cached(db, "old") is None
    assert get_cached(db, "new") == {"v": 2}


def test_zero_ttl_is_a_miss(tmp_path):
    db = init_cache_db(str(tmp_path / "results.db"))
    set_cached(db, "k", "seq", {"v": 1}, ttl_hours=0)
    assert get_cached(db, "k") is None
