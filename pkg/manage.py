#!/usr/bin/env python3
"""
Management commands for the fibre-cavity ion trap simulator
Every experiment command writes CSV/JSON into --out and records a ledger row
"""
import json
import logging
import traceback
from pathlib import Path
from typing import Callable, List

import click

from config.settings import load_settings, settings
from models.errors import ConfigurationError, SimulationError
from models.state import RunLedger
from models.tables import ExperimentResult
from services.experiments import ExperimentRunner
from services.report_writer import ReportWriter, json_safe
from services.trap_model import save_model

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None, help='TOML configuration file')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Master seed (overrides the config)')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default='results', show_default=True, help='Output directory')
@click.option('--json', 'json_output', is_flag=True, help='Print the run summary as JSON')
@click.option('--workers', type=click.IntRange(min=1), default=None, help='Threads for scan points')
@click.pass_context
def cli(ctx, config_path, seed, out_dir, json_output, workers):
    """Fibre-cavity ion trap simulator commands"""
    ctx.ensure_object(dict)
    try:
        loaded = load_settings(config_path, master_seed=seed, workers=workers)
    except ConfigurationError as e:
        logger.error(f"❌ {e} (keys: {e.keys})")
        ctx.exit(1)
    logging.getLogger().setLevel(getattr(logging, loaded.log_level.upper(), logging.INFO))
    ctx.obj.update(settings=loaded, out_dir=Path(out_dir), json_output=json_output)


def _execute(ctx, experiment: str, produce: Callable[[ExperimentRunner, ReportWriter], List[ExperimentResult]]):
    """Run one experiment command under the ledger and write its outputs"""
    loaded = ctx.obj['settings']
    out_dir = ctx.obj['out_dir']
    runner = ExperimentRunner(loaded)
    ledger = RunLedger(loaded.database_url)
    run_id = ledger.start_run(experiment, runner.config_hash, loaded.master_seed, str(out_dir))
    logger.info(f"🚀 Starting {experiment} (seed {loaded.master_seed})")

    try:
        writer = ReportWriter(out_dir, runner.config_hash, loaded.master_seed)
        results = produce(runner, writer)
        written = []
        for result in results:
            written.extend(writer.write_result(result))
        summary = json_safe({result.name: result.summary for result in results})
        ledger.finish_run(run_id, summary)
        logger.info(f"🎉 {experiment} completed: {len(written)} files in {out_dir}")
        if ctx.obj['json_output']:
            payload = {result.name: json_safe(result.to_dict()) for result in results}
            click.echo(json.dumps(payload, indent=2, sort_keys=True))
    except SimulationError as e:
        error_msg = f"{experiment} failed: {type(e).__name__}: {e}"
        logger.error(f"❌ {error_msg}")
        logger.error(traceback.format_exc())
        ledger.fail_run(run_id, error_msg)
        ctx.exit(1)
    except Exception as e:
        logger.error(f"❌ {experiment} crashed: {e}")
        logger.error(traceback.format_exc())
        ledger.fail_run(run_id, f"{type(e).__name__}: {e}")
        raise


@cli.command('solve-fields')
@click.option('--basis-out', type=click.Path(dir_okay=False), default=None, help='Also write the extracted basis as JSON')
@click.pass_context
def solve_fields(ctx, basis_out):
    """Solve the electrode potentials and extract multipoles"""
    def produce(runner, writer):
        result, basis = runner.solve_fields()
        if basis_out:
            path = Path(basis_out)
            path.write_text(json.dumps({k: v.to_dict() for k, v in sorted(basis.items())}, indent=2, sort_keys=True) + "\n")
            logger.info(f"✅ Basis written to {path}")
        return [result]
    _execute(ctx, 'solve_fields', produce)


@cli.command()
@click.pass_context
def calibrate(ctx):
    """Pin the analytic trap model to the calibration targets"""
    def produce(runner, writer):
        result = runner.calibrate()
        save_model(runner.calibrated[0], writer.out_dir / 'trap_model.json')
        return [result]
    _execute(ctx, 'calibrate', produce)


@cli.command('secular-scan')
@click.pass_context
def secular_scan(ctx):
    """Secular frequencies versus main-drive amplitude"""
    _execute(ctx, 'secular_scan', lambda runner, writer: [runner.run_secular_slope_scan()])


@cli.command('minimum-scan')
@click.pass_context
def minimum_scan(ctx):
    """Pseudopotential minimum versus radial-electrode amplitude"""
    _execute(ctx, 'minimum_scan', lambda runner, writer: [runner.run_minimum_scan()])


@cli.command('phase-scan')
@click.option('--channel', type=click.Choice(['radial', 'axial', 'both']), default='both', show_default=True)
@click.pass_context
def phase_scan(ctx, channel):
    """Micromotion amplitude versus additional-RF phase"""
    channels = ['radial', 'axial'] if channel == 'both' else [channel]
    _execute(ctx, 'phase_scan', lambda runner, writer: [runner.run_phase_scan(c) for c in channels])


@cli.command('axial-scan')
@click.pass_context
def axial_scan(ctx):
    """Standing-wave trace along the cavity axis"""
    _execute(ctx, 'axial_scan', lambda runner, writer: [runner.run_axial_standing_wave_scan()])


@cli.command('radial-map')
@click.pass_context
def radial_map(ctx):
    """Transverse cavity-mode map from emission spectra"""
    _execute(ctx, 'radial_map', lambda runner, writer: [runner.run_radial_mode_map()])


@cli.command('displacement-cal')
@click.option('--amplifier-gain', type=click.FloatRange(min=0, min_open=True), default=None, help='Override V per Vpp')
@click.pass_context
def displacement_cal(ctx, amplifier_gain):
    """Camera displacement calibration of the radial drive"""
    _execute(ctx, 'displacement_cal', lambda runner, writer: [runner.run_displacement_calibration(amplifier_gain)])


@cli.command('servo-sim')
@click.pass_context
def servo_sim(ctx):
    """Cavity-length lock: margins, Bode table and time-domain residual"""
    _execute(ctx, 'servo_sim', lambda runner, writer: [runner.run_servo_simulation()])


@cli.command()
@click.pass_context
def trajectory(ctx):
    """Integrate one trajectory at the configured drive"""
    _execute(ctx, 'trajectory', lambda runner, writer: [runner.run_trajectory()])


@cli.command('run-all')
@click.pass_context
def run_all(ctx):
    """Every experiment in sequence with one seed"""
    def produce(runner, writer):
        results = runner.run_all()
        save_model(runner.calibrated[0], writer.out_dir / 'trap_model.json')
        return results
    _execute(ctx, 'run_all', produce)


@cli.command('cleanup-old-records')
@click.option('--days', default=90, help='Number of days of records to keep')
@click.pass_context
def cleanup_old_records(ctx, days):
    """Clean up old run records"""
    logger.info(f"Cleaning up records older than {days} days...")
    ledger = RunLedger(ctx.obj['settings'].database_url)
    deleted = ledger.cleanup_old_records(days_to_keep=days)
    logger.info(f"✅ Removed {deleted} records")


@cli.command('show-history')
@click.option('--limit', default=10, help='Number of runs to show')
@click.pass_context
def show_history(ctx, limit):
    """Show recent run history"""
    ledger = RunLedger(ctx.obj['settings'].database_url)
    history = ledger.get_execution_history(limit=limit)
    if ctx.obj['json_output']:
        click.echo(json.dumps(history, indent=2, sort_keys=True))
        return
    if not history:
        click.echo("No run history found")
        return

    click.echo("-" * 80)
    for record in history:
        status_emoji = {'completed': '✅', 'failed': '❌', 'running': '🔄'}.get(record['status'], '❓')
        click.echo(
            f"{status_emoji} #{record['id']} | {record['experiment']} | {record['status']} | "
            f"seed {record['master_seed']} | {record['created_at']}"
        )
        if record['error_message']:
            click.echo(f"   Error: {record['error_message']}")
    click.echo("-" * 80)


if __name__ == '__main__':
    cli()
