"""도메인 서비스: 스케줄, denoiser, 샘플러, 보상, 미세조정, 진단"""
