import { OverrideAction, ScoringConfigWire, SlideReportWire } from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

/**
 * Thin client over the review service. Report-returning mutations hand back
 * the parsed body; exportReportBytes keeps the exact bytes the server sent so
 * a download is byte-identical to GET /slides/{id}/report.
 */
export class ApiClient {
  constructor(private baseUrl: string, private fetchImpl: FetchLike = fetch.bind(globalThis)) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    if (!resp.ok && resp.status !== 202) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        if (body && body.detail) detail = String(body.detail);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return resp;
  }

  async getReport(slideId: string): Promise<{ ready: boolean; report?: SlideReportWire; progress?: number }> {
    const resp = await this.request(`/slides/${slideId}/report`);
    if (resp.status === 202) {
      const body = await resp.json();
      return { ready: false, progress: body.progress ?? 0 };
    }
    return { ready: true, report: (await resp.json()) as SlideReportWire };
  }

  async overrideNucleus(
    slideId: string,
    nucleusId: number,
    action: OverrideAction,
    className?: string,
  ): Promise<SlideReportWire> {
    const body: Record<string, unknown> = { action };
    if (className !== undefined) body['class'] = className;
    const resp = await this.request(`/slides/${slideId}/nuclei/${nucleusId}`, {
      method: 'PATCH',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
    return (await resp.json()) as SlideReportWire;
  }

  async updateConfig(slideId: string, scoring: ScoringConfigWire): Promise<SlideReportWire> {
    const resp = await this.request(`/slides/${slideId}/config`, {
      method: 'PUT',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(scoring),
    });
    return (await resp.json()) as SlideReportWire;
  }

  /** Raw report bytes for export; never re-serialized client side. */
  async exportReportBytes(slideId: string): Promise<Uint8Array> {
    const resp = await this.request(`/slides/${slideId}/report`);
    if (resp.status === 202) throw new ApiError(202, 'report still processing');
    return new Uint8Array(await resp.arrayBuffer());
  }

  overlayUrl(slideId: string, layer: 'nuclei' | 'signals' | 'cam', nucleusId?: number): string {
    const suffix = nucleusId === undefined ? '' : `&nucleus_id=${nucleusId}`;
    return `${this.baseUrl}/slides/${slideId}/overlay?layer=${layer}${suffix}`;
  }
}
