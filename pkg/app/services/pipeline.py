"""
Orchestration of the virtual and wearable experiments plus the single-step
commands (fuse, augment, train, predict, evaluate, similarity, export).

Every random choice derives from `PipelineConfig.seed` through
`numpy.random.SeedSequence`, so outputs do not depend on `jobs`.
"""
import asyncio
import logging
import time
from itertools import product
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from app.errors import InvalidInputError, StreamError
from app.models import (
    AugmentSettings,
    CellReport,
    DatasetManifest,
    EcocModelRecord,
    PipelineConfig,
    RunMetrics,
    RunReport,
    SessionEntry,
    SessionsManifest,
    ShotSelection,
)
from app.services.augmentation import (
    FEATURE_COLUMNS,
    AugmentedDataset,
    PostureDictionary,
    build_training_dictionary,
    dataset_frame,
    dataset_from_frame,
    shot_replicated_dataset,
)
from app.services.classifier import EcocModel, ecoc_predict_batch, train_ecoc, tune_hyperparameters
from app.services.evaluation import (
    accuracy,
    feature_mean,
    lambda_components,
    macro_f1,
    metrics_report,
    similarity_matrix,
    summarize_runs,
)
from app.services.fusion import PoseTimeseries, build_test_matrix, frame_from_streams, fuse_session, orientation_frame
from app.services.kinematics import characterize_sequence, hold_midpoints, parse_bvh, write_bvh
from app.services.simulation import (
    canonical_postures,
    generate_motion_sequence,
    segment_trajectories,
    simulate_sessions,
    synthesize_imu_streams,
)
from app.storage.repository import ArtifactRepository

logger = logging.getLogger(__name__)

MODULE_FILES = ("RW", "LW", "RA", "LA")


def child_seeds(seed: int, n: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


class Recording(BaseModel):
    """A fused session with its label, trial and split."""
    label: int
    trial: int
    split: Optional[str] = None
    poses: PoseTimeseries


class WearableRun(BaseModel):
    """First repeat of a wearable cell; its model and outputs are the ones saved."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: List[int]
    shots: List[ShotSelection]
    train: AugmentedDataset
    model: EcocModel
    predicted: np.ndarray


class PipelineService:
    """
    Business Logic Layer for the command line.
    Runs CPU-bound work in worker threads, at most `config.jobs` at a time.
    """
    def __init__(self, repo: ArtifactRepository, config: PipelineConfig):
        self.repo = repo
        self.config = config

    async def _map(self, fn: Callable, items: Sequence[tuple]) -> list:
        semaphore = asyncio.Semaphore(self.config.jobs)

        async def run(args: tuple):
            async with semaphore:
                return await asyncio.to_thread(fn, *args)

        return await asyncio.gather(*(run(args) for args in items))

    async def _finish(self, command: str, started: float, **fields) -> RunReport:
        report = RunReport(
            command=command,
            config=self.config.model_dump(mode="json", exclude={"out_dir", "jobs"}),
            timing_s=time.perf_counter() - started,
            digests=dict(sorted(self.repo.engine.written.items())),
            inputs=dict(sorted(self.repo.engine.read.items())),
            **fields,
        )
        # report.json is identical across reruns; timing only lives on the returned report
        await self.repo.save_report("report.json", report, exclude={"timing_s"})
        await self.repo.write_manifest()
        return report

    # --- Posture dictionary ---
    async def virtual_dictionary(self) -> PostureDictionary:
        """Shots taken at hold midpoints of a BVH sequence; the canonical sequence when no BVH is configured."""
        cfg = self.config
        if cfg.bvh_path is not None:
            anim = parse_bvh(await self.repo.load_bvh(str(cfg.bvh_path)))
            period = cfg.hold_frames + cfg.transition_frames
            count, rest = divmod(anim.num_frames + cfg.transition_frames, period)
            if rest or count < 2:
                raise InvalidInputError(
                    f"{anim.num_frames} frames do not fit a hold {cfg.hold_frames} / transition "
                    f"{cfg.transition_frames} schedule"
                )
        else:
            postures = canonical_postures(cfg.seed)
            anim = generate_motion_sequence([p.pose for p in postures.postures], cfg.hold_frames, cfg.transition_frames)
            count = len(postures.postures)
        frames = hold_midpoints(count, cfg.hold_frames, cfg.transition_frames)
        poses = await asyncio.to_thread(characterize_sequence, anim, frames)
        return PostureDictionary(labels=list(range(1, count + 1)), poses=poses)

    def _hyperparameters(self, train: AugmentedDataset, seed: int) -> Tuple[float, float]:
        cfg = self.config
        if cfg.C is not None and cfg.gamma is not None:
            return cfg.C, cfg.gamma
        result = tune_hyperparameters(
            train, cfg.search_budget, cfg.search_bounds, cfg.search_strategy,
            cfg.validation_fraction, cfg.search_max_rows_per_class, seed,
        )
        return result.C, result.gamma

    # --- simulate ---
    async def simulate(self, imu: bool = False) -> RunReport:
        started = time.perf_counter()
        cfg = self.config
        postures = canonical_postures(cfg.seed)
        anim = generate_motion_sequence([p.pose for p in postures.postures], cfg.hold_frames, cfg.transition_frames)
        await self.repo.save_postures("postures.json", postures)
        await self.repo.save_bvh("sequence.bvh", write_bvh(anim))
        if imu:
            parent, child = await asyncio.to_thread(segment_trajectories, anim)
            t = np.arange(anim.num_frames) * anim.frame_time
            seeds = child_seeds(cfg.seed, len(MODULE_FILES))
            for j, module_id in enumerate(MODULE_FILES):
                stream = synthesize_imu_streams(parent[j], child[j], t, module_id, cfg.noise, seeds[j])
                await self.repo.save_table(f"imu/{module_id}.csv", frame_from_streams([stream]))
        logger.info(f"Simulated {anim.num_frames}-frame sequence of {len(postures.postures)} postures")
        return await self._finish("simulate", started)

    # --- run-virtual ---
    def _training_set(self, dictionary: PostureDictionary, phi: float, theta: float, count: int, seed: int):
        if self.config.no_augment:
            return shot_replicated_dataset(dictionary, count)
        return build_training_dictionary(
            dictionary, AugmentSettings(sigma_phi_sq=phi, sigma_theta_sq=theta, count=count, seed=seed)
        )

    def _run_cell(self, dictionary: PostureDictionary, phi: float, theta: float, seed: int) -> CellReport:
        cfg = self.config
        tuned = None
        runs = []
        for repeat, repeat_seed in enumerate(child_seeds(seed, cfg.repeats)):
            train_seed, test_seed, search_seed = child_seeds(repeat_seed, 3)
            train = self._training_set(dictionary, phi, theta, cfg.train_count, train_seed)
            test = build_training_dictionary(
                dictionary, AugmentSettings(sigma_phi_sq=phi, sigma_theta_sq=theta, count=cfg.test_count, seed=test_seed)
            )
            if tuned is None or cfg.tune_every_repeat:
                tuned = self._hyperparameters(train, search_seed)
            model = train_ecoc(train, *tuned, labels=dictionary.labels)
            predicted, _ = ecoc_predict_batch(model, test.features)
            runs.append(RunMetrics(
                repeat=repeat, seed=train_seed,
                accuracy=accuracy(predicted, test.labels),
                macro_f1=macro_f1(predicted, test.labels, classes=dictionary.labels),
                C=tuned[0], gamma=tuned[1],
            ))
        cell = summarize_runs(phi, theta, runs)
        logger.info(f"Cell ({phi:g}, {theta:g}): macro-F1 {cell.macro_f1_mean:.3f} ± {cell.macro_f1_std:.3f}")
        return cell

    async def run_virtual(self) -> RunReport:
        started = time.perf_counter()
        cfg = self.config
        dictionary = await self.virtual_dictionary()
        grid = list(product(cfg.sigma_phi_sq_grid, cfg.sigma_theta_sq_grid))
        seeds = child_seeds(cfg.seed, len(grid))
        cells: List[CellReport] = await self._map(
            self._run_cell, [(dictionary, phi, theta, s) for (phi, theta), s in zip(grid, seeds)]
        )
        await self._write_heatmaps(cells)
        return await self._finish("run-virtual", started, cells=cells)

    async def _write_heatmaps(self, cells: List[CellReport]) -> None:
        """Grid cells in sigma_phi_sq-major order, one CSV per summary statistic."""
        cfg = self.config
        for field in ("macro_f1_mean", "macro_f1_std", "accuracy_mean", "accuracy_std"):
            matrix = np.array([getattr(c, field) for c in cells]).reshape(
                len(cfg.sigma_phi_sq_grid), len(cfg.sigma_theta_sq_grid)
            )
            await self.repo.save_matrix(
                f"heatmap_{field}.csv", matrix, cfg.sigma_phi_sq_grid, cfg.sigma_theta_sq_grid, "sigma_phi_sq",
            )

    # --- run-wearable ---
    async def _sessions(self) -> List[Tuple[SessionEntry, Dict]]:
        cfg = self.config
        if cfg.sessions_path is not None:
            manifest = await self.repo.load_sessions_manifest(str(cfg.sessions_path))
            loaded = [await self.repo.load_session(entry.paths) for entry in manifest.sessions]
            return list(zip(manifest.sessions, loaded))

        postures = canonical_postures(cfg.seed)
        simulated = await asyncio.to_thread(
            simulate_sessions, postures, cfg.session_trials, cfg.session_duration_s, cfg.rate_hz, cfg.noise,
            cfg.test_axis_sigma_sq, cfg.test_angle_sigma_sq, cfg.seed,
        )
        entries = []
        for session in simulated:
            name = f"sessions/posture{session.label:02d}_trial{session.trial}.csv"
            path = await self.repo.save_table(name, frame_from_streams(list(session.streams.values())))
            entries.append(SessionEntry(
                label=session.label, trial=session.trial, paths=[Path(path.name)], split=session.split,
            ))
        await self.repo.save_sessions_manifest("sessions/sessions.json", SessionsManifest(sessions=entries))
        return [(entry, session.streams) for entry, session in zip(entries, simulated)]

    def _fuse(self, streams: Dict) -> PoseTimeseries:
        cfg = self.config
        poses = fuse_session(streams, cfg.beta, cfg.rate_hz, cfg.initial_alignment, cfg.warmup_s)
        if len(poses) == 0:
            raise StreamError(f"no samples left after the {cfg.warmup_s} s warm-up")
        return poses

    def _assign_splits(self, recordings: List[Recording], rng: np.random.Generator) -> None:
        """One seeded test trial per label for recordings without a declared split."""
        for label in sorted({r.label for r in recordings}):
            undeclared = [r for r in recordings if r.label == label and r.split is None]
            if not undeclared:
                continue
            if len(undeclared) < 2 and not any(r.split == "train" for r in recordings if r.label == label):
                raise InvalidInputError(f"posture {label} needs at least two sessions to split train and test")
            test = undeclared[int(rng.integers(len(undeclared)))]
            for r in undeclared:
                r.split = "test" if r is test else "train"

    def _select_shots(
        self, recordings: List[Recording], rng: np.random.Generator
    ) -> Tuple[PostureDictionary, List[ShotSelection]]:
        labels, poses, shots = [], [], []
        for label in sorted({r.label for r in recordings if r.split == "train"}):
            candidates = [r for r in recordings if r.label == label and r.split == "train"]
            chosen = candidates[int(rng.integers(len(candidates)))]
            row = int(rng.integers(len(chosen.poses)))
            labels.append(label)
            poses.append(chosen.poses.pose(row))
            shots.append(ShotSelection(label=label, trial=chosen.trial, row=row))
            logger.info(f"Shot for posture {label}: trial {chosen.trial}, row {row}")
        return PostureDictionary(labels=labels, poses=poses), shots

    def _wearable_training_set(
        self, recordings: List[Recording], phi: float, theta: float, shot_seed: int, augment_seed: int,
    ) -> Tuple[PostureDictionary, List[ShotSelection], AugmentedDataset]:
        dictionary, shots = self._select_shots(recordings, np.random.default_rng(shot_seed))
        if self.config.no_augment:
            train_recordings = [r for r in recordings if r.split == "train"]
            return dictionary, shots, AugmentedDataset(
                features=np.concatenate([r.poses.features() for r in train_recordings]),
                labels=np.concatenate([np.full(len(r.poses), r.label) for r in train_recordings]),
            )
        train = build_training_dictionary(dictionary, AugmentSettings(
            sigma_phi_sq=phi, sigma_theta_sq=theta, count=self.config.wearable_train_count, seed=augment_seed,
        ))
        return dictionary, shots, train

    def _wearable_cell(
        self, recordings: List[Recording], test_x: np.ndarray, test_y: np.ndarray,
        phi: float, theta: float, seed: int,
    ) -> Tuple[CellReport, WearableRun]:
        """Every repeat draws new shots and a new augmentation against the same test rows."""
        cfg = self.config
        tuned, first, runs = None, None, []
        for repeat, repeat_seed in enumerate(child_seeds(seed, cfg.repeats)):
            shot_seed, augment_seed, search_seed = child_seeds(repeat_seed, 3)
            dictionary, shots, train = self._wearable_training_set(recordings, phi, theta, shot_seed, augment_seed)
            if tuned is None or cfg.tune_every_repeat:
                tuned = self._hyperparameters(train, search_seed)
            model = train_ecoc(train, *tuned, labels=dictionary.labels)
            predicted, _ = ecoc_predict_batch(model, test_x)
            runs.append(RunMetrics(
                repeat=repeat, seed=augment_seed,
                accuracy=accuracy(predicted, test_y),
                macro_f1=macro_f1(predicted, test_y, classes=dictionary.labels),
                C=tuned[0], gamma=tuned[1],
            ))
            if first is None:
                first = WearableRun(labels=dictionary.labels, shots=shots, train=train, model=model, predicted=predicted)
        cell = summarize_runs(phi, theta, runs)
        logger.info(f"Wearable cell ({phi:g}, {theta:g}): macro-F1 {cell.macro_f1_mean:.3f} ± {cell.macro_f1_std:.3f}")
        return cell, first

    async def run_wearable(self) -> RunReport:
        started = time.perf_counter()
        cfg = self.config
        sessions = await self._sessions()
        fused = await self._map(self._fuse, [(streams,) for _, streams in sessions])
        recordings = [Recording(label=e.label, trial=e.trial, split=e.split, poses=poses) for (e, _), poses in zip(sessions, fused)]
        split_seed, main_seed, sweep_seed = child_seeds(cfg.seed, 3)
        self._assign_splits(recordings, np.random.default_rng(split_seed))
        for r in recordings:
            await self.repo.save_table(
                f"orientations/posture{r.label:02d}_trial{r.trial}.csv", orientation_frame(r.poses)
            )

        test_recordings = [r for r in recordings if r.split == "test"]
        if not test_recordings:
            raise InvalidInputError("no test sessions")
        missing = sorted({r.label for r in test_recordings} - {r.label for r in recordings if r.split == "train"})
        if missing:
            raise InvalidInputError(f"test postures {missing} have no training session")
        matrix = build_test_matrix([(r.label, r.poses) for r in test_recordings])
        logger.info(f"Test matrix: {matrix.values.shape[0]} rows, {matrix.padded_count} padded entries skipped")
        test_x, test_y = matrix.valid_rows()

        phi, theta = cfg.wearable_setting
        main, run = await asyncio.to_thread(self._wearable_cell, recordings, test_x, test_y, phi, theta, main_seed)
        await self.repo.save_model("wearable", run.model.to_record())
        metrics = metrics_report(run.predicted, test_y, run.labels, runs=main.runs)
        await self.repo.save_report("metrics.json", metrics)
        await self.repo.save_matrix("confusion.csv", np.array(metrics.confusion), run.labels, run.labels)
        await self.repo.save_matrix(
            "confusion_row_norm.csv", np.array(metrics.confusion_row_norm), run.labels, run.labels,
        )
        await self._write_similarity(run.train, matrix, run.labels)
        await self._write_one_vs_all(run.train, test_recordings, run.labels)
        await self.repo.save_table("train_features.csv", dataset_frame(run.train))
        await self.repo.save_table("test_features.csv", dataset_frame(AugmentedDataset(features=test_x, labels=test_y)))

        cells = [main]
        if cfg.wearable_sweep and not cfg.no_augment:
            grid = list(product(cfg.sigma_phi_sq_grid, cfg.sigma_theta_sq_grid))
            swept = await self._map(self._wearable_cell, [
                (recordings, test_x, test_y, p, t, s) for (p, t), s in zip(grid, child_seeds(sweep_seed, len(grid)))
            ])
            await self._write_heatmaps([cell for cell, _ in swept])
            cells += [cell for cell, _ in swept]
        return await self._finish("run-wearable", started, cells=cells, metrics=metrics, shots=run.shots)

    async def _write_similarity(self, train, test, classes) -> None:
        sim = await asyncio.to_thread(
            similarity_matrix, train, test, classes, self.config.similarity_pair_cap, self.config.seed
        )
        await self.repo.save_matrix("similarity_lambda.csv", sim.total, classes, classes)
        await self.repo.save_matrix("similarity_phi.csv", sim.lambda_phi, classes, classes)
        await self.repo.save_matrix("similarity_theta.csv", sim.lambda_theta, classes, classes)

    async def _write_one_vs_all(self, train: AugmentedDataset, test: List[Recording], classes) -> None:
        means = {c: feature_mean(train.rows_of(c)) for c in classes}
        rows = []
        for r in test:
            x = feature_mean(r.poses.features())
            for c in classes:
                phi, theta = lambda_components(x, means[c])
                rows.append({"test_label": r.label, "trial": r.trial, "train_label": c,
                             "lambda_phi": float(phi), "lambda_theta": float(theta), "lambda": float(phi + theta)})
        await self.repo.save_table("one_vs_all.csv", pd.DataFrame(rows))

    # --- Single-step commands ---
    async def fuse(self, paths: Sequence[Path], name: str = "orientations.csv") -> RunReport:
        started = time.perf_counter()
        streams = await self.repo.load_session(paths)
        poses = await asyncio.to_thread(self._fuse, streams)
        await self.repo.save_table(name, orientation_frame(poses))
        return await self._finish("fuse", started)

    async def augment(
        self, sigma_phi_sq: float, sigma_theta_sq: float, count: int, name: str = "dataset", split: str = "train",
    ) -> RunReport:
        started = time.perf_counter()
        dictionary = await self.virtual_dictionary()
        settings = AugmentSettings(
            sigma_phi_sq=sigma_phi_sq, sigma_theta_sq=sigma_theta_sq, count=count, seed=self.config.seed,
        )
        dataset = await asyncio.to_thread(build_training_dictionary, dictionary, settings)
        manifest = DatasetManifest(
            labels=dataset.classes, rows=len(dataset), settings=settings, seed=self.config.seed, split=split,
        )
        await self.repo.save_dataset(name, dataset_frame(dataset), manifest)
        return await self._finish("augment", started)

    async def _dataset(self, path: str) -> AugmentedDataset:
        frame, manifest = await self.repo.load_dataset(path)
        return dataset_from_frame(frame.dropna(subset=FEATURE_COLUMNS), manifest)

    async def _model(self, model_id: str) -> EcocModel:
        record: EcocModelRecord = await self.repo.load_model(model_id)
        return EcocModel.from_record(record)

    async def train(self, dataset_path: str, model_id: str = "model") -> RunReport:
        started = time.perf_counter()
        train = await self._dataset(dataset_path)
        C, gamma = await asyncio.to_thread(self._hyperparameters, train, self.config.seed)
        model = await asyncio.to_thread(train_ecoc, train, C, gamma)
        await self.repo.save_model(model_id, model.to_record())
        return await self._finish("train", started)

    async def predict(self, model_id: str, dataset_path: str, name: str = "predictions.csv") -> RunReport:
        started = time.perf_counter()
        model = await self._model(model_id)
        frame = (await self.repo.load_table(dataset_path)).dropna(subset=FEATURE_COLUMNS)
        predicted, losses = await asyncio.to_thread(
            ecoc_predict_batch, model, frame[FEATURE_COLUMNS].to_numpy(dtype=float)
        )
        out = pd.DataFrame(losses, columns=[f"loss_{c}" for c in model.labels])
        out.insert(0, "predicted", predicted)
        if "label" in frame.columns:
            out.insert(0, "label", frame["label"].to_numpy(dtype=int))
        await self.repo.save_table(name, out)
        return await self._finish("predict", started)

    async def evaluate(self, model_id: str, dataset_path: str) -> RunReport:
        started = time.perf_counter()
        model = await self._model(model_id)
        test = await self._dataset(dataset_path)
        predicted, _ = await asyncio.to_thread(ecoc_predict_batch, model, test.features)
        metrics = metrics_report(predicted, test.labels, model.labels)
        await self.repo.save_report("metrics.json", metrics)
        await self.repo.save_matrix("confusion.csv", np.array(metrics.confusion), model.labels, model.labels)
        return await self._finish("evaluate", started, metrics=metrics)

    async def similarity(self, train_path: str, test_path: str) -> RunReport:
        started = time.perf_counter()
        train = await self._dataset(train_path)
        test = await self._dataset(test_path)
        await self._write_similarity(train, test, train.classes)
        return await self._finish("similarity", started)

    async def export_features(self, train_path: str, test_path: Optional[str] = None,
                              name: str = "features.csv") -> RunReport:
        started = time.perf_counter()
        parts = []
        for split, path in (("train", train_path), ("test", test_path)):
            if path is None:
                continue
            dataset = await self._dataset(path)
            frame = dataset_frame(dataset)
            frame.insert(1, "split", split)
            parts.append(frame)
        await self.repo.save_table(name, pd.concat(parts, ignore_index=True))
        return await self._finish("export-features", started)
