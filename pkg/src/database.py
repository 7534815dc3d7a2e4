"""Database connection and session management for the reference-value cache."""

import os

from dotenv import load_dotenv
from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

load_dotenv()

CACHE_URL = os.getenv("MLSC_CACHE_URL", "sqlite:///mlsc_cache.db")

engine = create_engine(CACHE_URL, echo=False)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


def make_session_factory(url: str) -> sessionmaker:
    """Session factory for another cache location (tests use a temporary SQLite file)."""
    return sessionmaker(autocommit=False, autoflush=False, bind=create_engine(url, echo=False))


def init_db(bind: Engine | None = None) -> None:
    """Create the cache tables if they do not exist."""
    from . import models  # noqa: F401  registers the tables on Base

    Base.metadata.create_all(bind=bind or engine)
