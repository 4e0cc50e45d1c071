"""
Flask status API for the fibre-cavity ion trap simulator (read-only)
"""
import logging
import os
from datetime import datetime

from flask import Flask, jsonify

from config.settings import Settings, config_hash, settings
from models.state import RunLedger

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def create_app(app_settings: Settings = settings, ledger: RunLedger = None) -> Flask:
    """Build the app around one settings object and run ledger"""
    app = Flask(__name__)
    ledger = ledger or RunLedger(app_settings.database_url)

    @app.route('/')
    def health_check():
        """Health check endpoint"""
        return jsonify({
            'status': 'healthy',
            'service': 'fibre-cavity ion trap simulator',
            'timestamp': datetime.now().isoformat(),
            'environment': app_settings.environment,
            'ledger_available': ledger.db_available,
        })

    @app.route('/status')
    def status():
        """Recent runs"""
        try:
            return jsonify({
                'status': 'operational',
                'recent_runs': ledger.get_execution_history(limit=10),
                'timestamp': datetime.now().isoformat(),
            })
        except Exception as e:
            logger.error(f"Error getting status: {e}")
            return jsonify({'status': 'error', 'error': str(e), 'timestamp': datetime.now().isoformat()}), 500

    @app.route('/config')
    def get_config():
        """Validated configuration and its hash"""
        return jsonify({
            'config_hash': config_hash(app_settings),
            'master_seed': app_settings.master_seed,
            'config': app_settings.model_dump(mode='json', exclude={'database_url'}),
        })

    @app.route('/runs/<int:run_id>')
    def get_run(run_id):
        run = ledger.get_run(run_id)
        if run is None:
            return jsonify({'error': f'run {run_id} not found', 'timestamp': datetime.now().isoformat()}), 404
        return jsonify(run)

    @app.errorhandler(404)
    def not_found(error):
        """Handle 404 errors"""
        return jsonify({
            'error': 'Endpoint not found',
            'available_endpoints': [
                '/ - Health check',
                '/status - Recent runs',
                '/config - Configuration',
                '/runs/<id> - One run with its summary',
            ],
            'timestamp': datetime.now().isoformat()
        }), 404

    @app.errorhandler(500)
    def internal_error(error):
        """Handle 500 errors"""
        logger.error(f"Internal server error: {error}")
        return jsonify({'error': 'Internal server error', 'timestamp': datetime.now().isoformat()}), 500

    return app


if __name__ == '__main__':
    # Local development only
    app = create_app()
    port = int(os.environ.get('PORT', 5000))
    debug = settings.environment == 'development'

    logger.info(f"Starting Flask app on port {port}, debug={debug}")
    app.run(host='0.0.0.0', port=port, debug=debug)
