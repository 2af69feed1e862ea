from typing import List, Dict, Any, Optional, Tuple
from pydantic import BaseModel, Field, field_validator, model_validator

Segment = Tuple[Tuple[float, float], Tuple[float, float]]


class SimilarityParams(BaseModel):
    sigma_squared: float = Field(36.0, gt=0, description="Received signal variance in dBm^2")
    min_similarity: float = Field(0.3, ge=0, le=1, description="Similarity gate for loop closure candidates")
    geometric_mean: bool = Field(False, description="Use the geometric mean of the per-AP factors instead of the 1/H prefactor")


class SequenceMatchParams(BaseModel):
    window_w: int = Field(80, ge=2, description="Fingerprint sequence window size in samples")
    k_neighbors: int = Field(2, ge=1, description="Reference fingerprints averaged per query")
    residual_threshold: float = Field(3.0, gt=0, description="Mean alignment distance accepted as a loop closure (m)")
    min_loop_distance: float = Field(50.0, gt=0, description="Accumulated path length between loop closure nodes (m)")
    wide_search: bool = Field(False, description="Search neighbours in [j-w, j+w] instead of [j-w/2, j+w/2]")
    prune_stride_fraction: float = Field(0.25, ge=0, le=1, description="Skip pairs within this fraction of w of an accepted closure")

    @field_validator("window_w")
    @classmethod
    def window_must_be_even(cls, value: int) -> int:
        if value % 2 != 0:
            raise ValueError("window_w must be even")
        return value

    @property
    def half_window(self) -> int:
        return self.window_w // 2

    @property
    def search_half_width(self) -> int:
        return self.window_w if self.wide_search else self.window_w // 2


class OptimizerConfig(BaseModel):
    max_iterations: int = Field(100, gt=0, description="Upper bound on LM iterations (accepted or rejected)")
    convergence_delta: float = Field(1e-6, gt=0, description="Relative chi2 change that stops the solver")
    initial_lambda: float = Field(1e-4, gt=0, description="Initial Levenberg-Marquardt damping")
    lambda_factor: float = Field(10.0, gt=1, description="Damping multiplier on reject, divisor on accept")
    max_lambda: float = Field(1e10, gt=0, description="Damping at which the solver gives up improving")


class InformationConfig(BaseModel):
    odometry: Tuple[float, float, float] = Field((20.0, 20.0, 100.0), description="Diagonal of odometry information")
    wifi_loop: Tuple[float, float, float] = Field((1.0, 1.0, 1.0), description="Diagonal of WiFi loop closure information")
    icp_proximity: Tuple[float, float, float] = Field((50.0, 50.0, 200.0), description="Diagonal of close-scan ICP information")
    icp_loop: Tuple[float, float, float] = Field((50.0, 50.0, 200.0), description="Diagonal of ICP loop closure information")

    @field_validator("odometry", "wifi_loop", "icp_proximity", "icp_loop")
    @classmethod
    def diagonal_positive(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(v <= 0 for v in value):
            raise ValueError("information diagonals must be positive")
        return value


class IcpParams(BaseModel):
    max_iterations: int = Field(50, gt=0, description="ICP iteration cap")
    correspondence_radius: float = Field(1.0, gt=0, description="Maximum nearest-neighbour distance for a correspondence (m)")
    convergence_epsilon: float = Field(1e-4, gt=0, description="Stop when the incremental update norm drops below this")
    proximity_trigger: float = Field(1.0, gt=0, description="Accumulated distance under which scans are matched (m)")
    loop_radius: float = Field(5.0, gt=0, description="Optimized displacement under which loop scans are matched (m)")
    extra_pose_fraction: float = Field(0.10, ge=0, le=1, description="Fraction of loop candidate source nodes evaluated")
    voxel_size: float = Field(0.05, gt=0, description="Voxel grid used to downsample scans before matching (m)")
    scan_time_tolerance: float = Field(0.5, gt=0, description="Maximum scan-to-node timestamp offset (s)")
    min_points: int = Field(10, ge=3, description="Scans with fewer points are not matched")
    restart_fitness: float = Field(1e-4, ge=0, description="Mean squared residual (m^2) above which rotated restarts are tried")
    rotation_restarts: int = Field(3, ge=0, description="Restarts tried on each side of the first solution's heading")
    restart_step: float = Field(0.01, gt=0, description="Heading offset between restarts (rad)")


class GridParams(BaseModel):
    resolution: float = Field(0.05, gt=0, description="Cell size in meters")
    hit_increment: float = Field(0.85, gt=0, description="Log-odds added to endpoint cells")
    miss_increment: float = Field(-0.4, lt=0, description="Log-odds added to traversed cells")
    clamp: float = Field(10.0, gt=0, description="Log-odds magnitude bound")
    occupied_threshold: float = Field(0.65, gt=0, lt=1, description="Probability above which a cell is occupied")
    free_threshold: float = Field(0.35, gt=0, lt=1, description="Probability below which a cell is free")

    @model_validator(mode="after")
    def thresholds_ordered(self):
        if self.free_threshold >= self.occupied_threshold:
            raise ValueError("free_threshold must be below occupied_threshold")
        return self


class WorldSpec(BaseModel):
    walls: List[Segment] = Field(default_factory=list, description="Wall line segments in meters")
    ap_positions: List[Tuple[float, float]] = Field(default_factory=list, description="Access point positions")
    extent: Tuple[float, float] = Field((30.0, 200.0), description="World size in meters (width, height)")
    seed: int = Field(0, description="Seed used to place access points")

    @field_validator("extent")
    @classmethod
    def extent_positive(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] <= 0 or value[1] <= 0:
            raise ValueError("extent must be positive")
        return value


class SensorNoiseSpec(BaseModel):
    odom_trans_noise: float = Field(0.02, ge=0, description="Translation noise std as a fraction of distance")
    odom_rot_noise: float = Field(0.05, ge=0, description="Rotation noise std in rad per rad turned")
    odom_drift_bias: float = Field(0.002, ge=0, description="Deterministic heading bias in rad per meter")
    rss_noise_sigma: float = Field(6.0, ge=0, description="RSS noise std in dBm")
    lidar_range_noise: float = Field(0.01, ge=0, description="Range noise std in meters")
    path_loss_exponent: float = Field(2.5, ge=0, description="Log-distance path loss exponent")
    tx_power_at_1m: float = Field(-40.0, description="RSS at 1 m from an AP in dBm")
    detection_floor: float = Field(-95.0, description="RSS below which an AP is not reported")

    @classmethod
    def noiseless(cls) -> "SensorNoiseSpec":
        return cls(odom_trans_noise=0.0, odom_rot_noise=0.0, odom_drift_bias=0.0,
                   rss_noise_sigma=0.0, lidar_range_noise=0.0)


class LidarSpec(BaseModel):
    fov_deg: float = Field(270.0, gt=0, le=360, description="Field of view in degrees")
    increment_deg: float = Field(0.25, gt=0, description="Angular step between beams in degrees")
    max_range: float = Field(20.0, gt=0, description="Maximum range in meters")


class ScenarioConfig(BaseModel):
    name: str = Field("default", description="Scenario name")
    seed: int = Field(0, description="Master seed; every stream derives its own child seed")
    extent: Tuple[float, float] = Field((30.0, 200.0), description="World size in meters")
    n_aps: int = Field(100, ge=1, description="Number of access points placed in the world")
    corridor_margin: float = Field(8.0, gt=0, description="Width of the corridor ring in meters")
    pillar_spacing: float = Field(12.0, gt=0, description="Distance between pillars along the corridor")
    laps: int = Field(2, ge=1, description="Number of times the corridor loop is traversed")
    speed: float = Field(0.4, gt=0, description="Robot speed in m/s")
    dt: float = Field(0.1, gt=0, description="Odometry and ground truth sample period in seconds")
    wifi_period: float = Field(2.0, gt=0, description="WiFi and scan sample period in seconds")
    noise: SensorNoiseSpec = Field(default_factory=SensorNoiseSpec)
    lidar: LidarSpec = Field(default_factory=LidarSpec)
    world: Optional[WorldSpec] = Field(None, description="Explicit world; generated from the fields above when omitted")
    waypoints: Optional[List[Tuple[float, float]]] = Field(None, description="Explicit route; the corridor loop when omitted")


class PipelineConfig(BaseModel):
    odometry_path: str = Field(..., description="odometry.csv path")
    wifi_path: str = Field(..., description="wifi.csv path")
    scans_path: Optional[str] = Field(None, description="scans.jsonl path")
    ground_truth_path: Optional[str] = Field(None, description="ground_truth.tum path for evaluation")
    output_dir: str = Field("./output", description="Directory receiving the run artifacts")
    seed: int = Field(0, description="Seed for the loop scan subsampling")
    enable_wifi: bool = Field(True, description="Detect WiFi fingerprint sequence loop closures")
    enable_close_scans: bool = Field(True, description="Match scans of nodes in close proximity")
    extra_pose_fraction: Optional[float] = Field(None, ge=0, le=1, description="Overrides icp.extra_pose_fraction")
    burst_window: float = Field(2.0, gt=0, description="WiFi records within this window form one fingerprint (s)")
    max_stream_gap: float = Field(5.0, gt=0, description="Largest tolerated timestamp misalignment between streams (s)")
    require_constraints: bool = Field(True, description="Fail when no loop closure of any kind is found")
    render_map: bool = Field(True, description="Render and export the occupancy grid")
    similarity: SimilarityParams = Field(default_factory=SimilarityParams)
    sequence: SequenceMatchParams = Field(default_factory=SequenceMatchParams)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    information: InformationConfig = Field(default_factory=InformationConfig)
    icp: IcpParams = Field(default_factory=IcpParams)
    grid: GridParams = Field(default_factory=GridParams)

    @model_validator(mode="after")
    def some_constraint_source(self):
        if not (self.enable_wifi or self.enable_close_scans or self.loop_fraction > 0):
            raise ValueError("at least one constraint source must be enabled")
        return self

    @property
    def loop_fraction(self) -> float:
        if self.extra_pose_fraction is not None:
            return self.extra_pose_fraction
        return self.icp.extra_pose_fraction


class SlamRequest(BaseModel):
    config: PipelineConfig = Field(..., description="Pipeline configuration for the run")


class SimulateRequest(BaseModel):
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    output_dir: str = Field(..., description="Directory receiving the generated logs")


class TaskResponse(BaseModel):
    task_id: str = Field(..., description="ID to track the task")
    status: str = Field(..., description="Status of the task")
    message: str = Field(..., description="Status message")


class SlamSummary(BaseModel):
    output_dir: str = Field(..., description="Directory holding the run artifacts")
    artifacts: Dict[str, str] = Field(..., description="Artifact name to path")
    metrics: Dict[str, Any] = Field(default_factory=dict, description="Contents of metrics.json")
    constraint_counts: Dict[str, int] = Field(default_factory=dict, description="Edges per kind in the final graph")
