# app/routes/data_routes.py
from flask import Blueprint, jsonify, request

from app.config import STANDARD_MASK_SIDES
from ml_training.data_pipeline import IMAGE_SIDE, masking_rate
from ml_training.errors import ValidationError

data_bp = Blueprint('data', __name__)


@data_bp.route('/api/data/masking-rates', methods=['GET'])
def get_masking_rates():
    """r = m^2 / 784 for the standard mask sides, or for ?m=... values"""
    try:
        requested = request.args.getlist('m', type=int)
        sides = requested or list(STANDARD_MASK_SIDES)
        rates = [{"mask_side": m, "mask_rate": masking_rate(m)} for m in sides]
        return jsonify({"status": "success", "image_side": IMAGE_SIDE, "rates": rates})
    except ValidationError as e:
        return jsonify({"status": "error", "message": str(e)}), 400
