"""Process-level configuration read from the environment."""

import logging
import os

logger = logging.getLogger(__name__)

# For local development, try to load .env file
try:
    from dotenv import load_dotenv

    load_dotenv()
except ImportError:
    pass


class Config:
    """Configuration manager for process-wide knobs.

    Experiment hyperparameters live in the JSON ExperimentConfig; this class
    only covers settings that belong to the machine running the experiment.
    """

    def get_parameter(self, name: str, default: str = None) -> str:
        """
        Get a parameter value from the environment.

        Args:
            name: Environment variable name (e.g., 'GRANGER_WORKERS').
            default: Default value if the variable is not set.

        Returns:
            The parameter value.

        Raises:
            ValueError: If the variable is not set and no default is given.
        """
        value = os.environ.get(name, default)
        if value is None:
            raise ValueError(f"Parameter {name} not found in environment")
        return value

    @property
    def workers(self) -> int:
        """Worker processes for independent run units (1 = serial, in-process)."""
        raw = self.get_parameter("GRANGER_WORKERS", default="1")
        try:
            value = int(raw)
        except ValueError:
            logger.warning("GRANGER_WORKERS=%r is not an integer; using 1", raw)
            return 1
        if value < 1:
            logger.warning("GRANGER_WORKERS=%d is below 1; using 1", value)
            return 1
        return value


# Global config instance
config = Config()
