"""Application layer - Dữ liệu, model VLM, huấn luyện, đánh giá."""
