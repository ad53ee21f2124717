import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)


@dataclass
class RunState:
    """Stages a run directory has completed, in execution order."""

    completed: list[str] = field(default_factory=list)
    config_label: str | None = None
    fingerprints: dict[str, str] = field(default_factory=dict)

    def is_completed(self, stage: str) -> bool:
        return stage in self.completed


class StateManager:
    """Manages persistent pipeline state for one run directory."""

    def __init__(self, run_dir: str | Path, state_file: str = "state.json"):
        self.run_dir = Path(run_dir)
        self.state_file = self.run_dir / state_file

    def get_state(self) -> RunState:
        """Load run state; a missing or empty file means a fresh run."""
        try:
            with open(self.state_file, "r", encoding="utf-8") as file:
                content = file.read()
                if not content.strip():
                    logger.info(f"{self.state_file} is empty")
                    return RunState()
                data = json.loads(content)
                state = RunState(
                    completed=list(data.get("completed", [])),
                    config_label=data.get("config_label"),
                    fingerprints=dict(data.get("fingerprints", {})),
                )
                logger.info(f"State loaded: completed={state.completed}")
                return state
        except FileNotFoundError:
            logger.info(f"{self.state_file} not found, starting fresh")
            return RunState()
        except Exception as e:
            logger.error(f"Failed to read state: {e}")
            raise

    def save_state(self, state: RunState) -> None:
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            data = {
                "completed": state.completed,
                "config_label": state.config_label,
                "fingerprints": state.fingerprints,
            }
            with open(self.state_file, "w", encoding="utf-8") as file:
                json.dump(data, file, indent=2)
            logger.debug(f"State saved: completed={state.completed}")
        except Exception as e:
            logger.error(f"Failed to save state: {e}")
            raise

    def mark_completed(self, state: RunState, stage: str, fingerprint: str | None = None) -> RunState:
        if stage not in state.completed:
            state.completed.append(stage)
        if fingerprint is not None:
            state.fingerprints[stage] = fingerprint
        self.save_state(state)
        return state

    def forget(self, state: RunState, stages: list[str]) -> RunState:
        dropped = [s for s in state.completed if s in stages]
        if dropped:
            logger.info(f"Invalidating stages: {dropped}")
        state.completed = [s for s in state.completed if s not in stages]
        state.fingerprints = {s: f for s, f in state.fingerprints.items() if s not in stages}
        self.save_state(state)
        return state
