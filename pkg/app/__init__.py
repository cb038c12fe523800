import os

from flask import Flask


def create_app(results_dir=None):
    """Flask application factory serving one results directory read-only"""
    app = Flask(__name__)

    app.config['RESULTS_DIR'] = os.path.abspath(results_dir or os.getenv('BDK_OUT_DIR', 'results'))
    app.config['JSON_SORT_KEYS'] = False

    # Services initialization
    from app.services.report_service import report_service

    app.config['report_service'] = report_service

    # Blueprints registering
    from app.routes.experiment_routes import experiment_bp
    from app.routes.data_routes import data_bp

    app.register_blueprint(experiment_bp)
    app.register_blueprint(data_bp)

    return app
