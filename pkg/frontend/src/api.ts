/** Typed client for the spinenav service API. Every console mutation goes
 * through this module; the console holds no truth of its own. */

export interface Transform {
  rotation: number[][];
  translation: number[];
}

export interface SessionView {
  schema_version: number;
  session_id: string;
  mode: string;
  modality: string;
  technique: string;
  state: string;
  n_events: number;
  n_plans: number;
  registration_present: boolean;
  verification_rms_mm: number | null;
  shots_total: number;
  verify_threshold_mm: number;
}

export interface ScrewPlan {
  vertebra: string;
  side: string;
  entry_mm: number[];
  direction: number[];
  length_mm: number;
  diameter_mm: number;
}

export interface PlanPreview {
  grade: string;
  max_breach_depth_mm: number;
  anterior_perforation: boolean;
}

export interface PlanResponse {
  schema_version: number;
  plan_id: string;
  plan: ScrewPlan;
  preview: PlanPreview | null;
}

export interface StreamFrame {
  schema_version: number;
  t_ms: number;
  visible: boolean;
  tool_in_drb: Transform | null;
  tool_in_image: Transform | null;
  plans: Record<string, ScrewPlan>;
}

export interface AlignResponse {
  schema_version: number;
  plan_id: string;
  guide_pose_robot_base: Transform;
  standoff_mm: number;
  waypoints: number;
  state: string;
}

export interface TrajectoryResponse {
  schema_version: number;
  dt_s: number;
  joints_rad: number[][];
  serialized: string;
  executed: boolean;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`API ${status}: ${detail}`);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const res = await this.fetchFn(`${this.baseUrl}/api/v1${path}`, {
      method,
      headers: body !== undefined ? { "content-type": "application/json" } : {},
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const parsed = (await res.json()) as { detail?: string };
        if (parsed.detail) detail = parsed.detail;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  createSession(body: {
    session_id?: string;
    mode?: string;
    modality?: string;
    technique?: string;
  }): Promise<SessionView> {
    return this.request("POST", "/sessions", body);
  }

  getSession(sid: string): Promise<SessionView> {
    return this.request("GET", `/sessions/${sid}`);
  }

  listSessions(): Promise<{ sessions: SessionView[] }> {
    return this.request("GET", "/sessions");
  }

  postEvent(sid: string, type: string, payload: object = {}): Promise<SessionView> {
    return this.request("POST", `/sessions/${sid}/events`, { type, payload });
  }

  listPlans(sid: string): Promise<{
    plans: Record<string, { plan: ScrewPlan; preview: PlanPreview | null }>;
  }> {
    return this.request("GET", `/sessions/${sid}/plans`);
  }

  getPlan(sid: string, pid: string): Promise<PlanResponse> {
    return this.request("GET", `/sessions/${sid}/plans/${pid}`);
  }

  addPlan(sid: string, planId: string, plan: ScrewPlan): Promise<PlanResponse> {
    return this.request("POST", `/sessions/${sid}/plans`, {
      plan_id: planId,
      plan,
    });
  }

  updatePlan(sid: string, pid: string, plan: ScrewPlan): Promise<PlanResponse> {
    return this.request("PUT", `/sessions/${sid}/plans/${pid}`, { plan });
  }

  deletePlan(sid: string, pid: string): Promise<{ deleted: string }> {
    return this.request("DELETE", `/sessions/${sid}/plans/${pid}`);
  }

  registerPointBased(
    sid: string,
    fixedDrb: { label: string; position_mm: number[] }[],
    movingImage: { label: string; position_mm: number[] }[],
  ): Promise<{ transform_image_to_drb: Transform; fre_rms_mm: number; state: string }> {
    return this.request("POST", `/sessions/${sid}/registration/point-based`, {
      fixed_drb: fixedDrb,
      moving_image: movingImage,
    });
  }

  submitProbes(
    sid: string,
    probes: { probed_mm: number[]; landmark_mm: number[] }[],
  ): Promise<{ decision: string; rms_mm: number; state: string }> {
    return this.request("POST", `/sessions/${sid}/verification`, { probes });
  }

  uploadPoseLog(sid: string, stream: string): Promise<{ frames: number }> {
    return this.request("POST", `/sessions/${sid}/navigation/pose-log`, {
      stream,
    });
  }

  startNavigation(
    sid: string,
    rateHz = 30,
    durationS = 2,
  ): Promise<{ streaming: boolean }> {
    return this.request("POST", `/sessions/${sid}/navigation/start`, {
      rate_hz: rateHz,
      duration_s: durationS,
    });
  }

  stopNavigation(sid: string): Promise<{ streaming: boolean }> {
    return this.request("POST", `/sessions/${sid}/navigation/stop`, {});
  }

  /** Fetch the pose stream. With pace=false the server returns the whole
   * deterministic frame sequence immediately (replay mode). */
  async fetchStream(sid: string, pace = true): Promise<StreamFrame[]> {
    const res = await this.fetchFn(
      `${this.baseUrl}/api/v1/sessions/${sid}/navigation/stream?pace=${pace}`,
    );
    if (!res.ok) {
      throw new ApiError(res.status, await res.text());
    }
    const text = await res.text();
    return text
      .split("\n")
      .filter((line) => line.trim().length > 0)
      .map((line) => JSON.parse(line) as StreamFrame);
  }

  robotAlign(sid: string, planId: string): Promise<AlignResponse> {
    return this.request("POST", `/sessions/${sid}/robot/align`, {
      plan_id: planId,
    });
  }

  robotTrajectory(sid: string): Promise<TrajectoryResponse> {
    return this.request("GET", `/sessions/${sid}/robot/trajectory`);
  }

  robotConfirm(sid: string): Promise<{ executed: boolean; final_joints_rad: number[] }> {
    return this.request("POST", `/sessions/${sid}/robot/confirm`, {});
  }

  recordShot(
    sid: string,
    screwId: string,
    phase: "placement" | "verification",
  ): Promise<{ screw_total: number; session_total: number }> {
    return this.request("POST", `/sessions/${sid}/shots`, {
      screw_id: screwId,
      phase,
    });
  }

  getReport(sid: string): Promise<Record<string, unknown>> {
    return this.request("GET", `/sessions/${sid}/report`);
  }
}
