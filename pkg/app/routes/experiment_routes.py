# app/routes/experiment_routes.py
import os

from flask import Blueprint, abort, current_app, jsonify, send_from_directory

from app.services.report_service import PLOTS

experiment_bp = Blueprint('experiment', __name__)


def get_report_service():
    """Get report service from app context"""
    return current_app.config.get('report_service')


def results_dir():
    return current_app.config['RESULTS_DIR']


@experiment_bp.route('/api/experiment/status', methods=['GET'])
def get_status():
    """Manifest, completed and in-flight cells, recent run log entries"""
    try:
        return jsonify({"status": "success", **get_report_service().run_status(results_dir())})
    except Exception as e:
        return jsonify({"status": "error", "message": str(e)}), 500


@experiment_bp.route('/api/experiment/records', methods=['GET'])
def get_records():
    try:
        records = get_report_service().records(results_dir())
        return jsonify({"status": "success", "count": len(records), "records": records})
    except Exception as e:
        return jsonify({"status": "error", "message": str(e)}), 500


@experiment_bp.route('/api/experiment/entropy', methods=['GET'])
def get_entropy():
    """Per-cell five-number summaries of the teacher's predictive entropy"""
    try:
        rows = get_report_service().entropy_rows(results_dir())
        return jsonify({"status": "success", "count": len(rows), "summaries": rows})
    except Exception as e:
        return jsonify({"status": "error", "message": str(e)}), 500


@experiment_bp.route('/api/experiment/plots/<name>', methods=['GET'])
def get_plot(name):
    if name not in PLOTS:
        return jsonify({"status": "error", "message": f"unknown plot '{name}'", "available": sorted(PLOTS)}), 404
    if not os.path.exists(os.path.join(results_dir(), PLOTS[name])):
        abort(404)
    return send_from_directory(results_dir(), PLOTS[name], mimetype='image/svg+xml')


@experiment_bp.route('/api/experiment/report', methods=['POST'])
def rebuild_report():
    """Re-emit CSV and SVG files from the stored records (no cells are run)"""
    try:
        if not os.path.isdir(results_dir()):
            return jsonify({"status": "error", "message": f"no results directory at {results_dir()}"}), 404
        return jsonify(get_report_service().write_report(results_dir()))
    except Exception as e:
        return jsonify({"status": "error", "message": str(e)}), 500
