import datetime
from functools import wraps
from pathlib import Path
from typing import Any, List, Optional

from loguru import logger
from peewee import SqliteDatabase, Model, DateTimeField, IntegerField, TextField, DatabaseProxy

database_proxy = DatabaseProxy()

class BaseModel(Model):
    class Meta:
        database = database_proxy

class LayerSummary(BaseModel):
    fingerprint = TextField(unique=True)
    summary = TextField()  # JSON list of boundary relation templates
    hits = IntegerField(default=0)
    created = DateTimeField(default=datetime.datetime.now)

class MetaData(BaseModel):
    key = TextField(unique=True)
    value = TextField()

def configure_database(database: Path):
    """
    Configure and initialize the SQLite database connection using the provided path.

    Args:
        database (Path): Path to the SQLite database file.

    Returns:
        SqliteDatabase: The configured database instance.
    """
    logger.info("Configuring database: {}", database)
    db = SqliteDatabase(database.as_posix(), autoconnect=False)
    database_proxy.initialize(db)
    logger.info("Database configured successfully: {}", database)
    return db

def with_database(func):
    """
    Decorator to ensure database connection is open for the wrapped function.
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        # Check if database is already connected
        was_closed = database_proxy.is_closed()
        if was_closed:
            database_proxy.connect()
        try:
            return func(*args, **kwargs)
        finally:
            # Only close if we opened the connection
            if was_closed and not database_proxy.is_closed():
                database_proxy.close()
    return wrapper

@with_database
def create_tables_if_not_exist():
    """
    Create LayerSummary and MetaData tables if they do not exist.
    """
    tables_to_create = []
    db = database_proxy.obj
    if not db.table_exists('layersummary'):
        tables_to_create.append(LayerSummary)
    if not db.table_exists('metadata'):
        tables_to_create.append(MetaData)
    if tables_to_create:
        db.create_tables(tables_to_create, safe=True)
        logger.info("Tables created: {}", [t._meta.table_name for t in tables_to_create])
    else:
        logger.info("All tables already exist")

@with_database
def save_summary(fingerprint: str, summary: str) -> bool:
    """
    Store the boundary summary of a verified layer, replacing any earlier entry.

    Args:
        fingerprint (str): Layer fingerprint.
        summary (str): JSON encoded relation templates.

    Returns:
        bool: True if saved successfully, False otherwise.
    """
    try:
        LayerSummary.insert(fingerprint=fingerprint, summary=summary).on_conflict_replace().execute()
        logger.debug("Layer summary saved: {}", fingerprint[:12])
        return True
    except Exception as e:
        logger.error("Failed to save layer summary: {}", e)
        return False

@with_database
def load_summary(fingerprint: str) -> Optional[str]:
    """
    Look up a stored layer summary and count the hit.

    Args:
        fingerprint (str): Layer fingerprint.

    Returns:
        str: The JSON summary, or None if the layer was never verified.
    """
    try:
        entry = LayerSummary.get_or_none(LayerSummary.fingerprint == fingerprint)
        if entry is None:
            return None
        LayerSummary.update(hits=LayerSummary.hits + 1).where(LayerSummary.id == entry.id).execute()
        logger.debug("Layer summary hit: {}", fingerprint[:12])
        return entry.summary
    except Exception as e:
        logger.error("Failed to load layer summary '{}': {}", fingerprint[:12], e)
        return None

@with_database
def get_summaries() -> List[tuple]:
    """
    Retrieve all stored summaries, most used first.

    Returns:
        list: List of tuples (fingerprint, hits, created).
    """
    try:
        query = LayerSummary.select().order_by(LayerSummary.hits.desc(), LayerSummary.fingerprint)
        return [(s.fingerprint, s.hits, s.created) for s in query]
    except Exception as e:
        logger.error("Failed to fetch layer summaries: {}", e)
        return []

@with_database
def count_summaries() -> int:
    try:
        return LayerSummary.select().count()
    except Exception as e:
        logger.error("Failed to count layer summaries: {}", e)
        return 0

@with_database
def set_metadata(key: str, value: Any) -> bool:
    """
    Set a metadata key-value pair.

    Args:
        key (str): Metadata key.
        value (Any): Metadata value.

    Returns:
        bool: True if set successfully, False otherwise.
    """
    try:
        MetaData.insert(key=key, value=str(value)).on_conflict_replace().execute()
        logger.info("Metadata set: {} = {}", key, value)
        return True
    except Exception as e:
        logger.error("Failed to set metadata '{}': {}", key, e)
        return False

@with_database
def get_metadata(key: str, default: Any = None):
    """
    Get a metadata value by key.

    Args:
        key (str): Metadata key.
        default (Any): Default value if key not found.

    Returns:
        Any: Metadata value or default.
    """
    try:
        entry = MetaData.get_or_none(MetaData.key == key)
        logger.debug("Metadata fetched: {} = {}", key, entry.value if entry else default)
        return entry.value if entry else default
    except Exception as e:
        logger.error("Failed to get metadata '{}': {}", key, e)
        return default

@with_database
def reset_database():
    """
    Delete all layer summaries and metadata from the database.
    """
    db = database_proxy.obj
    with db.atomic():
        LayerSummary.delete().execute()
        MetaData.delete().execute()
    logger.debug("Database reset: all summaries and metadata deleted")
