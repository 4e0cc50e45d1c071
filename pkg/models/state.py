"""
Database models for the experiment run ledger
"""
import logging
from datetime import datetime, timedelta
from typing import Any, Dict, List, Optional

from sqlalchemy import JSON, Column, DateTime, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()


class ExperimentRun(Base):
    """One CLI experiment run"""
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    experiment = Column(String(40), nullable=False)  # e.g. "phase_scan_radial"
    status = Column(String(20), nullable=False)  # "running", "completed", "failed"
    config_hash = Column(String(64), nullable=False)
    master_seed = Column(Integer, nullable=False)
    output_dir = Column(Text, nullable=True)
    summary = Column(JSON, nullable=True)
    error_message = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'experiment': self.experiment,
            'status': self.status,
            'config_hash': self.config_hash,
            'master_seed': self.master_seed,
            'output_dir': self.output_dir,
            'summary': self.summary,
            'error_message': self.error_message,
            'created_at': self.created_at.isoformat() if self.created_at else None,
            'updated_at': self.updated_at.isoformat() if self.updated_at else None,
        }


class RunLedger:
    """Records experiment runs; degrades to a no-op when the database is unavailable"""

    def __init__(self, database_url: str):
        self.engine = None
        self.SessionLocal = None
        self.db_available = False
        try:
            self.engine = create_engine(database_url)
            self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
            self._create_tables()
            self.db_available = True
        except Exception as e:
            logger.warning(f"Database not available: {e}")
            logger.warning("Continuing without database (run ledger disabled)")
            self.db_available = False

    def _create_tables(self):
        """Create database tables if they don't exist"""
        try:
            Base.metadata.create_all(bind=self.engine)
            logger.info("Database tables created/verified successfully")
        except Exception as e:
            logger.error(f"Error creating database tables: {e}")
            raise

    def start_run(self, experiment: str, config_hash: str, master_seed: int, output_dir: Optional[str] = None) -> Optional[int]:
        """
        Open a ledger row in state "running"

        Returns:
            Run id, or None when the ledger is disabled
        """
        if not self.db_available:
            logger.debug("Database not available, skipping start_run")
            return None
        try:
            with self.SessionLocal() as session:
                run = ExperimentRun(
                    experiment=experiment,
                    status="running",
                    config_hash=config_hash,
                    master_seed=master_seed,
                    output_dir=output_dir,
                )
                session.add(run)
                session.commit()
                logger.info(f"Started run {run.id}: {experiment}")
                return run.id
        except Exception as e:
            logger.error(f"Error starting run: {e}")
            return None

    def _update(self, run_id: Optional[int], **fields) -> bool:
        if not self.db_available or run_id is None:
            return False
        try:
            with self.SessionLocal() as session:
                run = session.get(ExperimentRun, run_id)
                if run is None:
                    logger.warning(f"No run with id {run_id}")
                    return False
                for key, value in fields.items():
                    setattr(run, key, value)
                run.updated_at = datetime.utcnow()
                session.commit()
                return True
        except Exception as e:
            logger.error(f"Error updating run {run_id}: {e}")
            return False

    def finish_run(self, run_id: Optional[int], summary: Optional[Dict[str, Any]] = None) -> bool:
        return self._update(run_id, status="completed", summary=summary)

    def fail_run(self, run_id: Optional[int], error_message: str) -> bool:
        return self._update(run_id, status="failed", error_message=error_message)

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        if not self.db_available:
            return None
        try:
            with self.SessionLocal() as session:
                run = session.get(ExperimentRun, run_id)
                return run.to_dict() if run else None
        except Exception as e:
            logger.error(f"Error retrieving run {run_id}: {e}")
            return None

    def get_execution_history(self, limit: int = 10) -> List[Dict[str, Any]]:
        """
        Get recent runs, newest first

        Args:
            limit: Maximum number of records to return
        """
        if not self.db_available:
            return []
        try:
            with self.SessionLocal() as session:
                runs = session.query(ExperimentRun).order_by(
                    ExperimentRun.created_at.desc(), ExperimentRun.id.desc()
                ).limit(limit).all()
                return [run.to_dict() for run in runs]
        except Exception as e:
            logger.error(f"Error retrieving execution history: {e}")
            return []

    def cleanup_old_records(self, days_to_keep: int = 90) -> int:
        """
        Delete runs older than days_to_keep

        Returns:
            Number of deleted rows (0 when the ledger is disabled)
        """
        if not self.db_available:
            return 0
        try:
            cutoff_date = datetime.utcnow() - timedelta(days=days_to_keep)
            with self.SessionLocal() as session:
                deleted_count = session.query(ExperimentRun).filter(
                    ExperimentRun.created_at < cutoff_date
                ).delete()
                session.commit()
                logger.info(f"Cleaned up {deleted_count} old run records")
                return deleted_count
        except Exception as e:
            logger.error(f"Error cleaning up old records: {e}")
            return 0
