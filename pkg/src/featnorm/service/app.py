"""FastAPI service exposing scenario generation, training, and the
evaluation protocols over HTTP. The CLI is a thin client of this app."""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..datagen import (
    DomainSpec,
    Scenario,
    default_domain_specs,
    generate_scenario,
    scenario_from_text,
    scenario_to_text,
)
from ..errors import ConfigurationError, ContractError, ShapeError
from ..evaluation import (
    ExperimentConfig,
    embeddings_to_text,
    evaluate_accuracy,
    run_category_shift_experiment,
    run_dg_experiment,
    run_sensitivity_sweep,
)
from ..network import NetworkSpec, checkpoint_from_text, checkpoint_to_text
from ..trainer import TrainConfig, train, training_log_lines
from .schemas import (
    CategoryShiftRequest,
    EmbedRequest,
    EmbedResponse,
    ExperimentRequest,
    ExperimentResponse,
    GenerateRequest,
    GenerateResponse,
    HealthResponse,
    ScenarioSource,
    SweepRequest,
    TrainRequest,
    TrainResponse,
    TrainSettingsModel,
)


def _build_scenario(source: ScenarioSource) -> Scenario:
    if source.scenario_text is not None:
        return scenario_from_text(source.scenario_text)
    gen = source.generation
    if gen.domains is None:
        specs = default_domain_specs(gen.num_classes, gen.input_dim)
    else:
        specs = tuple(
            DomainSpec(
                rotation_angle=d.rotation_angle,
                scale=d.scale,
                translation=tuple(d.translation),
                noise_sigma=d.noise_sigma,
                present_classes=frozenset(d.present_classes),
            )
            for d in gen.domains
        )
    return generate_scenario(gen.num_classes, gen.input_dim, gen.samples_per_class, specs, gen.seed)


def _network_spec(scenario: Scenario, settings: TrainSettingsModel) -> NetworkSpec:
    return NetworkSpec(
        input_dim=scenario.input_dim,
        hidden_dims=tuple(settings.hidden_dims),
        feature_dim=settings.feature_dim,
        num_classes=scenario.num_classes,
    )


def _experiment_config(req: ExperimentRequest, scenario: Scenario, **extra) -> ExperimentConfig:
    return ExperimentConfig(
        scenario=scenario,
        target_domain_index=req.target_domain,
        network_spec=_network_spec(scenario, req.settings),
        regimes=tuple(req.regimes),
        seeds=tuple(req.seeds),
        epochs=req.settings.epochs,
        batch_size=req.settings.batch_size,
        learning_rate=req.settings.learning_rate,
        momentum=req.settings.momentum,
        gamma=req.settings.gamma,
        delta_r=req.settings.delta_r,
        experiment_id=req.experiment_id,
        **extra,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="featnorm experiment service", version=__version__)

    @app.exception_handler(ConfigurationError)
    @app.exception_handler(ContractError)
    @app.exception_handler(ShapeError)
    async def _bad_request(request: Request, exc: Exception):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/scenario/generate", response_model=GenerateResponse)
    def generate(req: GenerateRequest) -> GenerateResponse:
        scenario = _build_scenario(ScenarioSource(generation=req))
        return GenerateResponse(
            scenario_text=scenario_to_text(scenario),
            num_samples=scenario.n_samples,
            num_domains=scenario.num_domains,
            num_classes=scenario.num_classes,
        )

    @app.post("/train", response_model=TrainResponse)
    def train_one(req: TrainRequest) -> TrainResponse:
        scenario = _build_scenario(req.scenario)
        sources = (
            tuple(req.sources)
            if req.sources is not None
            else tuple(d for d in range(scenario.num_domains) if d != req.target_domain)
        )
        if req.target_domain in sources:
            raise ConfigurationError("target domain listed among the sources")
        spec = _network_spec(scenario, req.settings)
        cfg = TrainConfig(
            regime=req.regime,
            network_spec=spec,
            epochs=req.settings.epochs,
            batch_size=req.settings.batch_size,
            seed=req.seed,
            learning_rate=req.settings.learning_rate,
            momentum=req.settings.momentum,
            gamma=req.settings.gamma,
            delta_r=req.settings.delta_r,
        )
        result = train(scenario, sources, cfg)
        last = result.loss_history[-1]
        return TrainResponse(
            checkpoint_text=checkpoint_to_text(spec, result.final_params),
            peer_checkpoint_text=(
                checkpoint_to_text(spec, result.peer_params) if result.peer_params else None
            ),
            log_text="\n".join(training_log_lines(result)) + "\n",
            steps=result.steps,
            final_total_loss=last.total,
            final_mean_feature_norm=result.norm_trace[-1],
            target_accuracy=evaluate_accuracy(result.final_params, scenario, req.target_domain),
        )

    @app.post("/experiment/dg", response_model=ExperimentResponse)
    def dg(req: ExperimentRequest) -> ExperimentResponse:
        scenario = _build_scenario(req.scenario)
        report = run_dg_experiment(_experiment_config(req, scenario))
        return ExperimentResponse(
            experiment_id=report.experiment_id,
            csv_text=report.to_csv(),
            json_text=report.to_json_text(),
        )

    @app.post("/experiment/category-shift", response_model=ExperimentResponse)
    def category_shift(req: CategoryShiftRequest) -> ExperimentResponse:
        scenario = _build_scenario(req.scenario)
        removal = {int(k): frozenset(v) for k, v in req.removed_classes.items()}
        report = run_category_shift_experiment(
            _experiment_config(req, scenario, category_shift=removal)
        )
        return ExperimentResponse(
            experiment_id=report.experiment_id,
            csv_text=report.to_csv(),
            json_text=report.to_json_text(),
        )

    @app.post("/experiment/sweep", response_model=ExperimentResponse)
    def sweep(req: SweepRequest) -> ExperimentResponse:
        scenario = _build_scenario(req.scenario)
        report = run_sensitivity_sweep(
            _experiment_config(req, scenario, delta_r_values=tuple(req.delta_r_values))
        )
        return ExperimentResponse(
            experiment_id=report.experiment_id,
            csv_text=report.to_csv(),
            json_text=report.to_json_text(),
        )

    @app.post("/embeddings", response_model=EmbedResponse)
    def embeddings(req: EmbedRequest) -> EmbedResponse:
        scenario = _build_scenario(req.scenario)
        _, params = checkpoint_from_text(req.checkpoint_text)
        dump = embeddings_to_text(params, scenario)
        return EmbedResponse(dump_text=dump, num_lines=scenario.n_samples)

    return app


app = create_app()
