"""
Worker threads for relaxed-align experiment grids
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from tqdm import tqdm

from relaxed_align.align import evaluate, train
from relaxed_align.config_manager import ConfigError, TrainConfig
from relaxed_align.distributions import GaussianMixtureSpec, sample_synthetic

logger = logging.getLogger(__name__)

WORKERS_ENV = "RELAXED_ALIGN_WORKERS"


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return 1
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{raw}'") from None
    if count < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive, got {count}")
    return count


@dataclass
class CellTask:
    """One (variant, beta, seed) training run of an experiment grid"""
    config: TrainConfig
    spec: GaussianMixtureSpec
    eval_seed_offset: int = 1000
    keep_metrics: bool = False

    @property
    def label(self) -> str:
        return f"{self.config.cell_name} seed={self.config.seed}"


class TrainingCellWorker:
    """Trains one cell; failures are recorded in the result instead of propagating"""

    def __init__(self, task: CellTask):
        self.task = task

    def run(self) -> Dict:
        config = self.task.config
        result = {
            'variant': config.variant,
            'beta': config.beta,
            'seed': config.seed,
            'success': False,
            'target_accuracy': None,
            'source_accuracy': None,
            'message': '',
            'metrics': None,
            'evaluation': None,
        }
        try:
            data = sample_synthetic(self.task.spec, config.seed)
            eval_data = sample_synthetic(self.task.spec, config.seed + self.task.eval_seed_offset)
            model, metrics = train(config, data, eval_data=eval_data)

            result['success'] = True
            result['target_accuracy'] = metrics.target_accuracy
            result['source_accuracy'] = metrics.source_accuracy
            result['message'] = f"Trained {len(metrics.source_loss)} steps"
            if self.task.keep_metrics:
                result['metrics'] = metrics
                result['evaluation'] = evaluate(model, eval_data)

        except Exception as e:
            result['message'] = f"Failed: {e}"
            logger.warning(f"{self.task.label} failed: {e}")

        return result


def run_cells(tasks: List[CellTask], workers: Optional[int] = None,
              on_result: Optional[Callable[[Dict], None]] = None, show_progress: bool = True) -> List[Dict]:
    """Train every task; results come back in task order whatever the completion order"""
    workers = workers or worker_count()
    results: List[Optional[Dict]] = [None] * len(tasks)
    logger.info(f"Running {len(tasks)} training cells on {workers} worker(s)")

    with tqdm(total=len(tasks), desc="Cells", disable=not show_progress) as bar:
        if workers == 1:
            for i, task in enumerate(tasks):
                results[i] = TrainingCellWorker(task).run()
                bar.update(1)
                if on_result:
                    on_result(results[i])
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(TrainingCellWorker(task).run) for task in tasks]
                # Results are consumed in submission order
                for i, future in enumerate(futures):
                    results[i] = future.result()
                    bar.update(1)
                    if on_result:
                        on_result(results[i])

    failed = sum(1 for r in results if not r['success'])
    if failed:
        logger.warning(f"{failed} of {len(tasks)} cells failed")
    return results
