"""SQLAlchemy models for cached overkill results.

Reference values E[I_{L*} psi(u_{h*})] dominate the wall time of every
experiment, so they are stored once per content hash of
(problem, functional, h*, L*) and reused across runs.

References:
- See src/estimators.py reference_value() for the read-through logic
- See src/schemas.py for the functional models that enter the hash
"""

from datetime import datetime

from sqlalchemy import DateTime, Float, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column

from .database import Base


class ReferenceValue(Base):
    """One overkill single-level collocation value."""

    __tablename__ = "reference_values"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    problem_hash: Mapped[str] = mapped_column(
        String(64),
        unique=True,
        nullable=False,
        index=True,
        doc="SHA-256 of the canonical JSON in `description`",
    )
    description: Mapped[str] = mapped_column(
        Text, doc="Canonical JSON of the problem, functional, h* and L*"
    )
    mesh_width: Mapped[float] = mapped_column(Float, nullable=False)
    grid_level: Mapped[int] = mapped_column(Integer, nullable=False)
    points: Mapped[int] = mapped_column(Integer, nullable=False)
    value: Mapped[float] = mapped_column(
        Float, nullable=False, doc="Stored as an 8-byte REAL, so the float round-trips exactly"
    )
    wall_time: Mapped[float | None] = mapped_column(Float)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)

    def __repr__(self) -> str:
        return f"<ReferenceValue {self.problem_hash[:12]} h={self.mesh_width} L={self.grid_level}>"
